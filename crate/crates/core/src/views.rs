use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One source of per-character features. The declaration order is the
/// layout order of the concatenated multi-view feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Semantic,
    Lexicon,
    Radical,
}

impl View {
    pub const ALL: [View; 3] = [View::Semantic, View::Lexicon, View::Radical];

    pub fn name(self) -> &'static str {
        match self {
            View::Semantic => "semantic",
            View::Lexicon => "lexicon",
            View::Radical => "radical",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "semantic" => Ok(View::Semantic),
            "lexicon" => Ok(View::Lexicon),
            "radical" => Ok(View::Radical),
            other => Err(Error::Config(format!("unknown view `{other}`"))),
        }
    }
}

/// Parses a comma-separated view list, sorted and deduplicated.
pub fn parse_view_list(s: &str) -> Result<Vec<View>, Error> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(part.parse()?);
    }
    out.sort();
    out.dedup();
    Ok(out)
}
