//! Synthetic relation corpora with planted, view-specific label cues.
//!
//! Every sentence looks like `fillers HEAD between TAIL fillers`. The label is
//! carried by a cue inside the `between` region that only one view can read
//! well:
//!
//! * lexicon: a two-character word from the relation's word pool. The lexicon
//!   file gives each relation's words vectors clustered around a per-relation
//!   centroid, so unseen cue words are still recognizable through the lexicon.
//! * radical: a character whose decomposition contains the relation's marker
//!   component. Many such characters exist per relation.
//! * semantic: two marker characters `x .. y` whose order encodes the label as
//!   `(y - x) mod K`.
//!
//! Views listed as noise receive a cue of the same form drawn from a separate
//! random stream that never reads the label.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RelationInstance, Span};
use crate::error::{Error, Result};
use crate::views::View;

pub const SYNTH_WORD_DIM: usize = 50;

const WORDS_PER_RELATION: usize = 60;
const NOISE_WORDS: usize = 200;
const RADICAL_CUE_CHARS: usize = 240;
const ENTITY_NAMES: usize = 80;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub n_relations: usize,
    pub seed: u64,
    pub signal: View,
    pub noise_views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub vector: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueEntry {
    pub cue: String,
    pub relation: String,
}

/// The generator's own cue → relation table. For lexicon mode cues are
/// words, for radical mode marker components, for semantic mode the ordered
/// marker pair written as a two-character string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueTable {
    pub signal: View,
    pub entries: Vec<CueEntry>,
}

impl CueTable {
    /// Rule-based prediction from the planted cue between the two entities.
    pub fn predict(
        &self,
        inst: &RelationInstance,
        radicals: &BTreeMap<char, Vec<String>>,
    ) -> Option<String> {
        let (lo, hi) = if inst.head.end <= inst.tail.start {
            (inst.head.end, inst.tail.start)
        } else {
            (inst.tail.end, inst.head.start)
        };
        let between = &inst.chars[lo..hi.max(lo)];
        let table: BTreeMap<&str, &str> = self
            .entries
            .iter()
            .map(|e| (e.cue.as_str(), e.relation.as_str()))
            .collect();
        match self.signal {
            View::Lexicon => {
                for i in 0..between.len() {
                    for j in i + 1..=between.len() {
                        let s: String = between[i..j].iter().collect();
                        if let Some(r) = table.get(s.as_str()) {
                            return Some(r.to_string());
                        }
                    }
                }
                None
            }
            View::Radical => between.iter().find_map(|c| {
                radicals
                    .get(c)?
                    .iter()
                    .find_map(|comp| table.get(comp.as_str()).map(|r| r.to_string()))
            }),
            View::Semantic => {
                let markers: BTreeSet<char> = self
                    .entries
                    .iter()
                    .flat_map(|e| e.cue.chars())
                    .collect();
                let seen: String = between.iter().filter(|c| markers.contains(c)).collect();
                table.get(seen.as_str()).map(|r| r.to_string())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub instances: Vec<RelationInstance>,
    pub lexicon: Vec<LexiconEntry>,
    /// Radical dictionary entries, character → components.
    pub radicals: BTreeMap<char, Vec<String>>,
    pub cue_table: CueTable,
    pub relations: Vec<String>,
}

fn cjk(base: u32, i: usize) -> char {
    char::from_u32(base + i as u32).expect("valid CJK code point")
}

// Disjoint code-point ranges for each character role.
const FILLER_BASE: u32 = 0x4E00;
const ENTITY_BASE: u32 = 0x4F00;
const CUE_WORD_BASE: u32 = 0x5000;
const NOISE_WORD_BASE: u32 = 0x5100;
const RADICAL_CUE_BASE: u32 = 0x5200;
const MARKER_BASE: u32 = 0x5400;
// Kangxi radicals serve as components; the tail of the block marks labels.
const COMPONENT_BASE: u32 = 0x2F00;
const GENERAL_COMPONENTS: usize = 150;
const LABEL_COMPONENT_BASE: u32 = 0x2FA0;

const N_FILLERS: usize = 40;
const N_ENTITY_CHARS: usize = 60;

fn pair_words(base: u32, pool: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pairs: Vec<String> = (0..pool)
        .flat_map(|a| (0..pool).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| [cjk(base, a), cjk(base, b)].iter().collect())
        .collect();
    pairs.shuffle(rng);
    pairs.truncate(count);
    pairs
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sd: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).expect("positive sd");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn round6(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| (x * 1e6).round() / 1e6).collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let k = cfg.n_relations;
    if k < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 relations".into()));
    }
    if k > 32 {
        return Err(Error::Config("synthetic corpus supports at most 32 relations".into()));
    }
    if cfg.noise_views.contains(&cfg.signal) {
        return Err(Error::Config(format!(
            "view `{}` cannot be both the signal and noise",
            cfg.signal
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Noise cues come from their own stream, which never sees a label.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let relations: Vec<String> = (0..k).map(|r| format!("rel{r}")).collect();
    let has = |v: View| cfg.signal == v || cfg.noise_views.contains(&v);

    // Word inventories.
    let cue_pool = ((2 * WORDS_PER_RELATION * k) as f64).sqrt().ceil() as usize + 2;
    let signal_words: Vec<Vec<String>> = {
        let all = pair_words(CUE_WORD_BASE, cue_pool, WORDS_PER_RELATION * k, &mut rng);
        all.chunks(WORDS_PER_RELATION).map(<[String]>::to_vec).collect()
    };
    let noise_words = pair_words(NOISE_WORD_BASE, 24, NOISE_WORDS, &mut rng);
    let entity_names: Vec<String> = (0..ENTITY_NAMES)
        .map(|_| {
            let len = rng.gen_range(2..=3);
            (0..len)
                .map(|_| cjk(ENTITY_BASE, rng.gen_range(0..N_ENTITY_CHARS)))
                .collect()
        })
        .collect::<BTreeSet<String>>()
        .into_iter()
        .collect();
    let filler_words = pair_words(FILLER_BASE, N_FILLERS, 30, &mut rng);

    // Lexicon with vectors. Signal words cluster per relation.
    let mut lexicon = Vec::new();
    let centroids: Vec<Vec<f64>> = (0..k).map(|_| gaussian(&mut rng, SYNTH_WORD_DIM, 1.0)).collect();
    if cfg.signal == View::Lexicon {
        for (r, words) in signal_words.iter().enumerate() {
            for w in words {
                let v: Vec<f64> = centroids[r]
                    .iter()
                    .zip(gaussian(&mut rng, SYNTH_WORD_DIM, 0.1))
                    .map(|(c, e)| c + e)
                    .collect();
                lexicon.push(LexiconEntry {
                    word: w.clone(),
                    vector: Some(round6(v)),
                });
            }
        }
    }
    if cfg.noise_views.contains(&View::Lexicon) {
        for w in &noise_words {
            lexicon.push(LexiconEntry {
                word: w.clone(),
                vector: Some(round6(gaussian(&mut rng, SYNTH_WORD_DIM, 1.0))),
            });
        }
    }
    for w in entity_names.iter().step_by(2).chain(&filler_words) {
        lexicon.push(LexiconEntry {
            word: w.clone(),
            vector: Some(round6(gaussian(&mut rng, SYNTH_WORD_DIM, 1.0))),
        });
    }

    // Radical dictionary: every generated character decomposes.
    let mut radicals: BTreeMap<char, Vec<String>> = BTreeMap::new();
    let general = |rng: &mut ChaCha8Rng| cjk(COMPONENT_BASE, rng.gen_range(0..GENERAL_COMPONENTS)).to_string();
    let label_component = |r: usize| cjk(LABEL_COMPONENT_BASE, r).to_string();
    let plain_chars = (0..N_FILLERS)
        .map(|i| cjk(FILLER_BASE, i))
        .chain((0..N_ENTITY_CHARS).map(|i| cjk(ENTITY_BASE, i)))
        .chain((0..cue_pool).map(|i| cjk(CUE_WORD_BASE, i)))
        .chain((0..24).map(|i| cjk(NOISE_WORD_BASE, i)))
        .chain((0..k).map(|i| cjk(MARKER_BASE, i)));
    for c in plain_chars.collect::<Vec<_>>() {
        let n = rng.gen_range(2..=3);
        radicals.insert(c, (0..n).map(|_| general(&mut rng)).collect());
    }
    let mut radical_cue_chars: Vec<Vec<char>> = vec![Vec::new(); k];
    for i in 0..RADICAL_CUE_CHARS {
        let c = cjk(RADICAL_CUE_BASE, i);
        let r = i % k;
        let mut comps: Vec<String> = (0..rng.gen_range(1..=2)).map(|_| general(&mut rng)).collect();
        let at = rng.gen_range(0..=comps.len());
        comps.insert(at, label_component(r));
        radicals.insert(c, comps);
        radical_cue_chars[r].push(c);
    }

    let cue_table = CueTable {
        signal: cfg.signal,
        entries: match cfg.signal {
            View::Lexicon => signal_words
                .iter()
                .enumerate()
                .flat_map(|(r, ws)| {
                    ws.iter().map(move |w| (w.clone(), r))
                })
                .map(|(cue, r)| CueEntry {
                    cue,
                    relation: relations[r].clone(),
                })
                .collect(),
            View::Radical => (0..k)
                .map(|r| CueEntry {
                    cue: label_component(r),
                    relation: relations[r].clone(),
                })
                .collect(),
            View::Semantic => (0..k)
                .flat_map(|x| (0..k).map(move |y| (x, y)))
                .map(|(x, y)| CueEntry {
                    cue: [cjk(MARKER_BASE, x), cjk(MARKER_BASE, y)].iter().collect(),
                    relation: relations[(y + k - x) % k].clone(),
                })
                .collect(),
        },
    };

    let filler = |rng: &mut ChaCha8Rng| cjk(FILLER_BASE, rng.gen_range(0..N_FILLERS));
    let mut instances = Vec::with_capacity(cfg.n_sentences);
    for i in 0..cfg.n_sentences {
        let label = i % k;
        // Cue units in the between region; each is a run of characters.
        let mut units: Vec<Vec<char>> = Vec::new();
        if has(View::Lexicon) {
            let w = if cfg.signal == View::Lexicon {
                signal_words[label].choose(&mut rng).expect("non-empty")
            } else {
                noise_words.choose(&mut noise_rng).expect("non-empty")
            };
            units.push(w.chars().collect());
        }
        if has(View::Radical) {
            let r = if cfg.signal == View::Radical {
                label
            } else {
                noise_rng.gen_range(0..k)
            };
            let pool = if cfg.signal == View::Radical { &mut rng } else { &mut noise_rng };
            units.push(vec![*radical_cue_chars[r].choose(pool).expect("non-empty")]);
        }
        let mut marker_pair = None;
        if has(View::Semantic) {
            let (x, y) = if cfg.signal == View::Semantic {
                let x = rng.gen_range(0..k);
                (x, (x + label) % k)
            } else {
                (noise_rng.gen_range(0..k), noise_rng.gen_range(0..k))
            };
            marker_pair = Some((cjk(MARKER_BASE, x), cjk(MARKER_BASE, y)));
        }
        units.shuffle(&mut rng);
        if let Some((x, y)) = marker_pair {
            // x goes before every other unit and y after, so order is explicit.
            units.insert(0, vec![x]);
            units.push(vec![y]);
        }

        let mut between: Vec<char> = Vec::new();
        for _ in 0..rng.gen_range(1..=2) {
            between.push(filler(&mut rng));
        }
        for u in units {
            between.extend(u);
            for _ in 0..rng.gen_range(1..=2) {
                between.push(filler(&mut rng));
            }
        }

        let head: Vec<char> = entity_names.choose(&mut rng).expect("non-empty").chars().collect();
        let tail: Vec<char> = entity_names.choose(&mut rng).expect("non-empty").chars().collect();
        let mut chars: Vec<char> = (0..rng.gen_range(0..=2)).map(|_| filler(&mut rng)).collect();
        let hs = chars.len();
        chars.extend(&head);
        let he = chars.len();
        chars.extend(&between);
        let ts = chars.len();
        chars.extend(&tail);
        let te = chars.len();
        chars.extend((0..rng.gen_range(0..=2)).map(|_| filler(&mut rng)));

        let inst = RelationInstance {
            chars,
            head: Span::new(hs, he),
            tail: Span::new(ts, te),
            relation: relations[label].clone(),
        };
        inst.validate()?;
        instances.push(inst);
    }

    Ok(SynthCorpus {
        instances,
        lexicon,
        radicals,
        cue_table,
        relations,
    })
}

impl SynthCorpus {
    /// Lexicon file text: `word v1 .. vd` per line.
    pub fn lexicon_text(&self) -> String {
        let mut out = String::new();
        for e in &self.lexicon {
            out.push_str(&e.word);
            if let Some(v) = &e.vector {
                for x in v {
                    out.push(' ');
                    out.push_str(&format!("{x}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Radical dictionary text: `char<TAB>c1 c2 ..` per line.
    pub fn radical_text(&self) -> String {
        let mut out = String::new();
        for (c, comps) in &self.radicals {
            out.push(*c);
            out.push('\t');
            out.push_str(&comps.join(" "));
            out.push('\n');
        }
        out
    }

    /// 80/10/10 split by position.
    pub fn split(&self) -> (Vec<RelationInstance>, Vec<RelationInstance>, Vec<RelationInstance>) {
        let n = self.instances.len();
        let n_train = n * 8 / 10;
        let n_dev = n / 10;
        let train = self.instances[..n_train].to_vec();
        let dev = self.instances[n_train..n_train + n_dev].to_vec();
        let test = self.instances[n_train + n_dev..].to_vec();
        (train, dev, test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(signal: View, noise: &[View], n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_sentences: n,
            n_relations: 4,
            seed,
            signal,
            noise_views: noise.to_vec(),
        }
    }

    #[test]
    fn labels_are_balanced() {
        let c = synth_generate(&cfg(View::Lexicon, &[], 200, 7)).unwrap();
        assert_eq!(c.instances.len(), 200);
        let mut counts = BTreeMap::new();
        for i in &c.instances {
            *counts.entry(i.relation.clone()).or_insert(0usize) += 1;
        }
        let (min, max) = (counts.values().min().unwrap(), counts.values().max().unwrap());
        assert_eq!(counts.len(), 4);
        assert!(max - min <= 1);
    }

    #[test]
    fn split_sizes() {
        let c = synth_generate(&cfg(View::Lexicon, &[], 200, 7)).unwrap();
        let (tr, dv, te) = c.split();
        assert_eq!((tr.len(), dv.len(), te.len()), (160, 20, 20));
    }

    #[test]
    fn cue_table_oracle_is_perfect_in_every_signal_mode() {
        for signal in View::ALL {
            let noise: Vec<View> = View::ALL.into_iter().filter(|&v| v != signal).collect();
            for noise in [vec![], noise] {
                let c = synth_generate(&cfg(signal, &noise, 300, 11)).unwrap();
                for inst in &c.instances {
                    let pred = c.cue_table.predict(inst, &c.radicals);
                    assert_eq!(pred.as_deref(), Some(inst.relation.as_str()), "{signal} {noise:?}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(synth_generate(&SynthConfig { n_relations: 1, ..cfg(View::Lexicon, &[], 10, 0) }).is_err());
        assert!(synth_generate(&cfg(View::Lexicon, &[View::Lexicon], 10, 0)).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_generate(&cfg(View::Radical, &[View::Lexicon], 50, 3)).unwrap();
        let b = synth_generate(&cfg(View::Radical, &[View::Lexicon], 50, 3)).unwrap();
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.lexicon_text(), b.lexicon_text());
        assert_eq!(a.radical_text(), b.radical_text());
    }

    /// Empirical mutual information (nats) between two discrete sequences.
    fn mutual_information(xs: &[String], ys: &[String]) -> f64 {
        let n = xs.len() as f64;
        let mut joint: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        let mut px: BTreeMap<&str, f64> = BTreeMap::new();
        let mut py: BTreeMap<&str, f64> = BTreeMap::new();
        for (x, y) in xs.iter().zip(ys) {
            *joint.entry((x, y)).or_default() += 1.0;
            *px.entry(x).or_default() += 1.0;
            *py.entry(y).or_default() += 1.0;
        }
        joint
            .iter()
            .map(|(&(x, y), &c)| (c / n) * ((c / n) / ((px[x] / n) * (py[y] / n))).ln())
            .sum()
    }

    #[test]
    fn noise_radical_cues_carry_no_label_information() {
        let c = synth_generate(&cfg(View::Lexicon, &[View::Radical], 8000, 5)).unwrap();
        let signal_table = CueTable {
            signal: View::Radical,
            entries: (0..4)
                .map(|r| CueEntry {
                    cue: cjk(LABEL_COMPONENT_BASE, r).to_string(),
                    relation: format!("rel{r}"),
                })
                .collect(),
        };
        let cues: Vec<String> = c
            .instances
            .iter()
            .map(|i| signal_table.predict(i, &c.radicals).expect("radical cue planted"))
            .collect();
        let labels: Vec<String> = c.instances.iter().map(|i| i.relation.clone()).collect();
        // Same statistic on the signal-mode corpus for contrast.
        let s = synth_generate(&cfg(View::Radical, &[], 8000, 5)).unwrap();
        let s_cues: Vec<String> = s
            .instances
            .iter()
            .map(|i| signal_table.predict(i, &s.radicals).unwrap())
            .collect();
        let s_labels: Vec<String> = s.instances.iter().map(|i| i.relation.clone()).collect();

        let mi_noise = mutual_information(&cues, &labels);
        let mi_signal = mutual_information(&s_cues, &s_labels);
        // Finite-sample bias for 4x4 tables at n=8000 is about 9/(2n).
        assert!(mi_noise < 0.005, "noise MI {mi_noise}");
        assert!((mi_signal - 4f64.ln()).abs() < 1e-9, "signal MI {mi_signal}");
    }
}
