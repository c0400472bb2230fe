pub mod data;
pub mod classifier;
pub mod error;
pub mod fusion;
pub mod lexicon;
pub mod model;
pub mod nn;
pub mod radical;
pub mod semantic;
pub mod tensor;
pub mod train;
pub mod views;

pub use error::{Error, Result};
pub use views::View;
