//! The assembled relation classifier: active view encoders, fusion,
//! sentence pooling and the output layer, plus checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, Classifier, Pooling};
use crate::data::{batchify, Batch, RelationInstance, Vocabularies, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionKind, GateMode};
use crate::lexicon::{Lexicon, LexiconEncoder, MatchTrie};
use crate::radical::{RadicalDictionary, RadicalDims, RadicalEncoder};
use crate::semantic::{SemanticDims, SemanticEncoder};
use crate::tensor::{checkpoint, Graph, NodeId, ParamStore};
use crate::views::View;

pub const DEFAULT_WORD_DIM: usize = 50;

/// Everything needed to rebuild the network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Active views in layout order.
    pub views: Vec<View>,
    pub fusion: FusionConfig,
    pub semantic: SemanticDims,
    pub radical: RadicalDims,
    /// Lexicon word-embedding size; replaced by the lexicon's own vector size
    /// when it ships pretrained vectors.
    pub word_dim: usize,
    pub biword: bool,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            views: View::ALL.to_vec(),
            fusion: FusionConfig::default(),
            semantic: SemanticDims::default(),
            radical: RadicalDims::default(),
            word_dim: DEFAULT_WORD_DIM,
            biword: false,
            pooling: Pooling::Max,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Sets every per-token feature width (view outputs, recurrent state,
    /// fusion output) to `hidden`.
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.semantic.hidden = hidden;
        self.semantic.out_dim = hidden;
        self.radical.out_dim = hidden;
        self.fusion.view_dim = hidden;
        self.fusion.out_dim = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("at least one view must stay active".into()));
        }
        if self.views.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "views must be distinct and in layout order".into(),
            ));
        }
        let d = self.fusion.view_dim;
        if self.semantic.out_dim != d || self.radical.out_dim != d {
            return Err(Error::Config(format!(
                "view widths disagree: semantic {}, radical {}, fusion expects {d}",
                self.semantic.out_dim, self.radical.out_dim
            )));
        }
        Ok(())
    }

    pub fn has_view(&self, v: View) -> bool {
        self.views.contains(&v)
    }
}

/// Independent RNG streams, so removing one module leaves the initial
/// values of the others unchanged.
fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const BIGRAM_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Parameter-free structure of the model; forward passes read weights from
/// a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub trie: MatchTrie,
    pub radicals: RadicalDictionary,
    pub semantic: Option<SemanticEncoder>,
    pub lexicon: Option<LexiconEncoder>,
    pub radical: Option<RadicalEncoder>,
    pub fusion: Fusion,
    pub classifier: Classifier,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[b, Y]`
    pub logits: NodeId,
    /// Fusion weights over views, `[tokens, V]`, for MoVE and attention.
    pub weights: Option<NodeId>,
    /// Fused per-token features, `[tokens, d]`.
    pub h_f: NodeId,
}

impl Network {
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        mode: &GateMode,
    ) -> Result<ForwardOutput> {
        if batch.lengths.iter().any(|&l| l == 0) {
            return Err(Error::EmptyPool);
        }
        let mut views = Vec::with_capacity(self.config.views.len());
        for view in &self.config.views {
            let h = match view {
                View::Semantic => {
                    let enc = self.semantic.as_ref().expect("semantic encoder built");
                    let x = enc.embed_input(g, store, batch)?;
                    let h = enc.encode(g, store, x, batch)?;
                    g.gather_rows(h, &batch.real_positions())?
                }
                View::Lexicon => {
                    let enc = self.lexicon.as_ref().expect("lexicon encoder built");
                    enc.encode(g, store, &batch.chars, &self.trie)?
                }
                View::Radical => {
                    let enc = self.radical.as_ref().expect("radical encoder built");
                    enc.encode(g, store, &batch.packed_chars(), &self.radicals)?
                }
            };
            views.push(h);
        }
        let fused = self.fusion.forward(g, store, &views, mode)?;
        let pooled = classifier::sentence_pool(
            g,
            fused.h_f,
            &batch.packed_segments(),
            self.config.pooling,
        )?;
        let logits = self.classifier.logits(g, store, pooled)?;
        Ok(ForwardOutput {
            logits,
            weights: fused.weights,
            h_f: fused.h_f,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: Vocabularies,
    lexicon: Vec<String>,
    radicals: RadicalDictionary,
}

/// Per-token gate weights of one sentence position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGate {
    pub sentence: usize,
    pub position: usize,
    pub ch: char,
    /// One weight per active view, in layout order.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub vocab: Vocabularies,
    pub lexicon: Lexicon,
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn new(
        mut config: ModelConfig,
        vocab: Vocabularies,
        lexicon: Lexicon,
        mut radicals: RadicalDictionary,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(d) = lexicon.vector_dim() {
            config.word_dim = d;
        }
        let chars: Vec<char> = vocab
            .chars
            .tokens()
            .iter()
            .filter_map(|t| {
                let mut it = t.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            })
            .collect();
        radicals.register_fallbacks(chars);

        let seed = config.seed;
        let mut store = ParamStore::new();
        let semantic = if config.has_view(View::Semantic) {
            let bigrams = config
                .biword
                .then(|| (vocab.bigrams.len(), seed ^ BIGRAM_SEED_SALT));
            Some(SemanticEncoder::new(
                &mut store,
                &mut module_rng(seed, 1),
                config.semantic,
                vocab.chars.len(),
                bigrams,
            )?)
        } else {
            None
        };
        let lexicon_enc = if config.has_view(View::Lexicon) {
            Some(LexiconEncoder::new(
                &mut store,
                &mut module_rng(seed, 2),
                &lexicon,
                config.word_dim,
                config.fusion.view_dim,
            )?)
        } else {
            None
        };
        let radical = if config.has_view(View::Radical) {
            Some(RadicalEncoder::new(
                &mut store,
                &mut module_rng(seed, 3),
                radicals.num_components(),
                config.radical,
            )?)
        } else {
            None
        };
        let fusion = Fusion::new(&mut store, &mut module_rng(seed, 4), &config.views, config.fusion)?;
        let classifier = Classifier::new(
            &mut store,
            &mut module_rng(seed, 5),
            config.fusion.out_dim,
            vocab.num_labels(),
        )?;
        Ok(Model {
            net: Network {
                trie: MatchTrie::build(&lexicon),
                radicals,
                semantic,
                lexicon: lexicon_enc,
                radical,
                fusion,
                classifier,
                config,
            },
            vocab,
            lexicon,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn fusion_kind(&self) -> FusionKind {
        self.net.fusion.kind()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, mode: &GateMode) -> Result<ForwardOutput> {
        self.net.forward(g, &self.store, batch, mode)
    }

    fn meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(CheckpointMeta {
            model: self.net.config.clone(),
            vocab: self.vocab.clone(),
            lexicon: self.lexicon.words().to_vec(),
            radicals: self.net.radicals.clone(),
        })?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.store, self.meta()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, self.meta()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, manifest) = checkpoint::from_bytes(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.meta)
            .map_err(|e| Error::Validation(format!("checkpoint metadata: {e}")))?;
        let lexicon = Lexicon::from_words(&meta.lexicon);
        let mut model = Model::new(meta.model, meta.vocab, lexicon, meta.radicals)?;
        let expected: Vec<(&str, &[usize])> = model
            .store
            .iter()
            .map(|(_, p)| (p.name.as_str(), p.value.shape()))
            .collect();
        let found: Vec<(&str, &[usize])> = store
            .iter()
            .map(|(_, p)| (p.name.as_str(), p.value.shape()))
            .collect();
        if expected != found {
            return Err(Error::Validation(
                "checkpoint parameters do not match its model configuration".into(),
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Class probabilities for every instance, in input order.
    pub fn predict(&self, instances: &[RelationInstance], mode: &GateMode) -> Result<Vec<Vec<f64>>> {
        let batches = batchify(instances, &self.vocab, DEFAULT_BATCH_SIZE, None, self.net.config.semantic.max_pos)?;
        let mut out = Vec::with_capacity(instances.len());
        for batch in &batches {
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, batch, mode)?;
            let logits = g.value(fwd.logits);
            for r in 0..batch.size() {
                let p = classifier::probabilities(logits.row(r));
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite probabilities for instance {}",
                        batch.indices[r]
                    )));
                }
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Dense MoVE gate weights of every real token.
    pub fn gate_weights(&self, instances: &[RelationInstance]) -> Result<Vec<TokenGate>> {
        if self.fusion_kind() != FusionKind::Move {
            return Err(Error::Config(format!(
                "gate inspection needs a move checkpoint, this one uses {}",
                self.fusion_kind()
            )));
        }
        let batches = batchify(instances, &self.vocab, DEFAULT_BATCH_SIZE, None, self.net.config.semantic.max_pos)?;
        let mut out = Vec::new();
        for batch in &batches {
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, batch, &GateMode::Dense)?;
            let alpha = g.value(fwd.weights.expect("move exposes its gate"));
            let mut row = 0;
            for (b, chars) in batch.chars.iter().enumerate() {
                for (position, &ch) in chars.iter().enumerate() {
                    out.push(TokenGate {
                        sentence: batch.indices[b],
                        position,
                        ch,
                        alpha: alpha.row(row).to_vec(),
                    });
                    row += 1;
                }
            }
        }
        Ok(out)
    }
}
