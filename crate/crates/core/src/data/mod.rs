//! Corpus ingestion, vocabularies, batching and synthetic corpora.

mod batch;
mod instance;
pub mod synth;
pub mod vocab;

pub use batch::{batchify, make_batch, relative_position, Batch, DEFAULT_BATCH_SIZE, DEFAULT_MAX_POS};
pub use instance::{load_jsonl, write_jsonl, RelationInstance, Span};
pub use vocab::{Vocab, Vocabularies};
