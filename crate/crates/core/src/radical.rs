//! Radical view: structural-component decomposition of characters and a
//! per-character convolutional encoder over the component sequence.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, Init, NodeId, ParamId, ParamStore};

/// Character → ordered component sequence, plus the component vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadicalDictionary {
    entries: BTreeMap<char, Vec<String>>,
    components: Vocab,
}

impl RadicalDictionary {
    /// Parses `char<TAB>components` lines; components are separated by tabs
    /// or spaces. The first entry for a character wins.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut components = Vocab::with_pad_unk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut fields = line.split(['\t', ' ']).filter(|f| !f.is_empty());
            let head = fields.next().ok_or_else(|| parse_err("missing character"))?;
            let mut chars = head.chars();
            let c = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(parse_err("first field must be a single character")),
            };
            let comps: Vec<String> = fields.map(str::to_string).collect();
            if comps.is_empty() {
                return Err(parse_err("empty component list"));
            }
            if entries.contains_key(&c) {
                continue;
            }
            for comp in &comps {
                components.insert(comp);
            }
            entries.insert(c, comps);
        }
        Ok(RadicalDictionary {
            entries,
            components,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (char, Vec<String>)>) -> Self {
        let mut text = String::new();
        for (c, comps) in entries {
            text.push(c);
            text.push('\t');
            text.push_str(&comps.join(" "));
            text.push('\n');
        }
        Self::parse(&text, Path::new("<memory>")).expect("well-formed entries")
    }

    /// Component sequence of `c`; characters without an entry decompose to
    /// themselves.
    pub fn decompose(&self, c: char) -> Vec<String> {
        match self.entries.get(&c) {
            Some(comps) => comps.clone(),
            None => vec![c.to_string()],
        }
    }

    /// Adds fallback singleton components for characters the dictionary
    /// does not cover, so they get their own embedding rows.
    pub fn register_fallbacks(&mut self, chars: impl IntoIterator<Item = char>) {
        let mut buf = [0u8; 4];
        for c in chars {
            if !self.entries.contains_key(&c) {
                self.components.insert(c.encode_utf8(&mut buf));
            }
        }
    }

    pub fn component_ids(&self, c: char) -> Vec<usize> {
        match self.entries.get(&c) {
            Some(comps) => comps.iter().map(|s| self.components.id_or_unk(s)).collect(),
            None => {
                let mut buf = [0u8; 4];
                vec![self.components.id_or_unk(c.encode_utf8(&mut buf))]
            }
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RadicalDims {
    pub component_dim: usize,
    pub conv_dim: usize,
    pub window: usize,
    pub out_dim: usize,
}

impl Default for RadicalDims {
    fn default() -> Self {
        RadicalDims {
            component_dim: 50,
            conv_dim: 100,
            window: 3,
            out_dim: 100,
        }
    }
}

/// Component embeddings → window-`w` convolution (tanh) → max over windows →
/// linear projection, independently for every character.
#[derive(Debug, Clone)]
pub struct RadicalEncoder {
    pub dims: RadicalDims,
    pub component_emb: ParamId,
    pub conv: Linear,
    pub proj: Linear,
}

impl RadicalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        num_components: usize,
        dims: RadicalDims,
    ) -> Result<Self> {
        let component_emb = store.init(
            "radical.component_emb",
            vec![num_components, dims.component_dim],
            Init::Uniform(0.1),
            rng,
        )?;
        store.freeze_row(component_emb, PAD);
        let conv = Linear::new(
            store,
            rng,
            "radical.conv",
            dims.window * dims.component_dim,
            dims.conv_dim,
        )?;
        let proj = Linear::new(store, rng, "radical.proj", dims.conv_dim, dims.out_dim)?;
        Ok(RadicalEncoder {
            dims,
            component_emb,
            conv,
            proj,
        })
    }

    /// Flattened component ids of every convolution window, and for each
    /// character the window rows belonging to it.
    fn windows(&self, chars: &[char], dict: &RadicalDictionary) -> (Vec<usize>, Vec<Vec<usize>>) {
        let w = self.dims.window;
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(chars.len());
        let mut next_row = 0;
        for &c in chars {
            let mut comps = dict.component_ids(c);
            if comps.len() < w {
                comps.resize(w, PAD);
            }
            let n_windows = comps.len() - w + 1;
            for p in 0..n_windows {
                ids.extend_from_slice(&comps[p..p + w]);
            }
            segments.push((next_row..next_row + n_windows).collect());
            next_row += n_windows;
        }
        (ids, segments)
    }

    /// Encodes a run of characters to `[chars.len(), out_dim]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        chars: &[char],
        dict: &RadicalDictionary,
    ) -> Result<NodeId> {
        let (ids, segments) = self.windows(chars, dict);
        let table = g.param(store, self.component_emb);
        let emb = g.gather_rows(table, &ids)?;
        let n_windows = ids.len() / self.dims.window;
        let stacked = g.reshape(emb, vec![n_windows, self.dims.window * self.dims.component_dim])?;
        let conv = self.conv.forward(g, store, stacked)?;
        let act = g.tanh(conv);
        let pooled = g.segment_max(act, &segments)?;
        self.proj.forward(g, store, pooled)
    }
}
