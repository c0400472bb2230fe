//! Lexicon view: trie matching of lexicon words, BMES word sets per
//! character, and the pooled-set encoder.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Row of the embedding table used for empty word sets.
pub const NONE_WORD: usize = 0;

/// External word list. Word ids start at 1; id 0 is the NONE row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    words: Vec<String>,
    #[serde(skip)]
    vectors: Vec<Option<Vec<f64>>>,
    #[serde(skip)]
    vector_dim: Option<usize>,
}

impl Lexicon {
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut lex = Lexicon {
            words: Vec::new(),
            vectors: Vec::new(),
            vector_dim: None,
        };
        let mut seen = BTreeSet::new();
        for w in words {
            let w = w.as_ref();
            if !w.is_empty() && seen.insert(w.to_string()) {
                lex.words.push(w.to_string());
                lex.vectors.push(None);
            }
        }
        lex
    }

    /// Parses `word [v1 .. vd]` lines. All vectors must share one dimension;
    /// duplicate words keep their first line.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lex = Lexicon::from_words(Vec::<String>::new());
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let mut fields = raw.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("bad float `{f}`: {e}"))))
                .collect::<Result<_>>()?;
            if index.contains_key(word) {
                continue;
            }
            let vector = if values.is_empty() {
                None
            } else {
                match lex.vector_dim {
                    Some(d) if d != values.len() => {
                        return Err(parse_err(format!(
                            "vector has {} values, earlier lines have {d}",
                            values.len()
                        )))
                    }
                    _ => lex.vector_dim = Some(values.len()),
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(parse_err("non-finite vector entry".into()));
                }
                Some(values)
            };
            index.insert(word.to_string(), lex.words.len());
            lex.words.push(word.to_string());
            lex.vectors.push(vector);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Word for a 1-based word id.
    pub fn word(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.words.get(i))
            .map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vector_dim(&self) -> Option<usize> {
        self.vector_dim
    }

    /// Embedding table `[len + 1, dim]`: row 0 is NONE, rows with a
    /// pretrained vector copy it, the rest draw from uniform(-0.1, 0.1).
    pub fn init_table(&self, dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if let Some(d) = self.vector_dim {
            if d != dim {
                return Err(Error::Config(format!(
                    "lexicon vectors have dimension {d}, model expects {dim}"
                )));
            }
        }
        let mut data = Vec::with_capacity((self.len() + 1) * dim);
        data.extend((0..dim).map(|_| rng.gen_range(-0.1..=0.1)));
        for v in &self.vectors {
            match v {
                Some(v) => data.extend_from_slice(v),
                None => data.extend((0..dim).map(|_| rng.gen_range(-0.1..=0.1))),
            }
        }
        Tensor::new(vec![self.len() + 1, dim], data)
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<char, usize>,
    word: Option<usize>,
}

/// Character-keyed prefix trie; terminal nodes carry 1-based word ids.
#[derive(Debug, Clone)]
pub struct MatchTrie {
    nodes: Vec<TrieNode>,
    max_len: usize,
}

impl MatchTrie {
    pub fn build(lexicon: &Lexicon) -> Self {
        let mut trie = MatchTrie {
            nodes: vec![TrieNode::default()],
            max_len: 0,
        };
        for (i, w) in lexicon.words().iter().enumerate() {
            trie.insert(w, i + 1);
        }
        trie
    }

    fn insert(&mut self, word: &str, id: usize) {
        let mut node = 0;
        let mut len = 0;
        for c in word.chars() {
            len += 1;
            node = match self.nodes[node].children.get(&c) {
                Some(&next) => next,
                None => {
                    self.nodes.push(TrieNode::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[node].children.insert(c, next);
                    next
                }
            };
        }
        if self.nodes[node].word.is_none() {
            self.nodes[node].word = Some(id);
        }
        self.max_len = self.max_len.max(len);
    }

    pub fn lookup(&self, word: &[char]) -> Option<usize> {
        let mut node = 0;
        for c in word {
            node = *self.nodes[node].children.get(c)?;
        }
        self.nodes[node].word
    }

    /// `(end, word_id)` for every lexicon word starting at `start`.
    pub fn matches_from(&self, chars: &[char], start: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut node = 0;
        for (end, c) in chars.iter().enumerate().skip(start) {
            match self.nodes[node].children.get(c) {
                Some(&next) => node = next,
                None => break,
            }
            if let Some(id) = self.nodes[node].word {
                out.push((end + 1, id));
            }
        }
        out
    }

    pub fn max_word_len(&self) -> usize {
        self.max_len
    }
}

/// Matched word ids of one character position, by role.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BmesSets {
    pub b: BTreeSet<usize>,
    pub m: BTreeSet<usize>,
    pub e: BTreeSet<usize>,
    pub s: BTreeSet<usize>,
}

impl BmesSets {
    pub fn as_array(&self) -> [&BTreeSet<usize>; 4] {
        [&self.b, &self.m, &self.e, &self.s]
    }
}

/// BMES sets for every position of `chars`. Runs in
/// `O(len * max_word_len)` trie steps plus the size of the output.
pub fn match_bmes(chars: &[char], trie: &MatchTrie) -> Vec<BmesSets> {
    let mut sets = vec![BmesSets::default(); chars.len()];
    for start in 0..chars.len() {
        for (end, id) in trie.matches_from(chars, start) {
            if end - start == 1 {
                sets[start].s.insert(id);
                continue;
            }
            sets[start].b.insert(id);
            sets[end - 1].e.insert(id);
            for set in &mut sets[start + 1..end - 1] {
                set.m.insert(id);
            }
        }
    }
    sets
}

/// Mean of the embedding rows in `set`, or the NONE row when it is empty.
/// Returns a `[dim]` node.
pub fn pool_set(g: &mut Graph, table: NodeId, set: &BTreeSet<usize>) -> Result<NodeId> {
    let ids: Vec<usize> = if set.is_empty() {
        vec![NONE_WORD]
    } else {
        set.iter().copied().collect()
    };
    let rows = g.gather_rows(table, &ids)?;
    let mean = g.segment_mean(rows, &[(0..ids.len()).collect()])?;
    let dim = g.shape(mean)[1];
    g.reshape(mean, vec![dim])
}

#[derive(Debug, Clone)]
pub struct LexiconEncoder {
    pub word_emb: ParamId,
    pub word_dim: usize,
    pub proj: Linear,
}

impl LexiconEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        lexicon: &Lexicon,
        word_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let table = lexicon.init_table(word_dim, rng)?;
        let word_emb = store.insert("lexicon.word_emb", table)?;
        let proj = Linear::new(store, rng, "lexicon.proj", 4 * word_dim, out_dim)?;
        Ok(LexiconEncoder {
            word_emb,
            word_dim,
            proj,
        })
    }

    /// Encodes each sentence's characters; rows of the result follow the
    /// sentences in order, `[total_chars, out_dim]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sentences: &[Vec<char>],
        trie: &MatchTrie,
    ) -> Result<NodeId> {
        let mut ids = Vec::new();
        let mut segments = Vec::new();
        for chars in sentences {
            for sets in match_bmes(chars, trie) {
                for set in sets.as_array() {
                    let start = ids.len();
                    if set.is_empty() {
                        ids.push(NONE_WORD);
                    } else {
                        ids.extend(set.iter().copied());
                    }
                    segments.push((start..ids.len()).collect::<Vec<_>>());
                }
            }
        }
        let n_tokens = segments.len() / 4;
        let table = g.param(store, self.word_emb);
        let rows = g.gather_rows(table, &ids)?;
        let pooled = g.segment_mean(rows, &segments)?;
        let per_token = g.reshape(pooled, vec![n_tokens, 4 * self.word_dim])?;
        self.proj.forward(g, store, per_token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Brute force: every substring tested for membership, classified by
    /// where it covers each position.
    fn brute_force_bmes(chars: &[char], lexicon: &Lexicon) -> Vec<BmesSets> {
        let ids: HashMap<&str, usize> = lexicon
            .words()
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i + 1))
            .collect();
        let mut sets = vec![BmesSets::default(); chars.len()];
        for start in 0..chars.len() {
            for end in start + 1..=chars.len() {
                let s: String = chars[start..end].iter().collect();
                let Some(&id) = ids.get(s.as_str()) else { continue };
                for (i, set) in sets.iter_mut().enumerate() {
                    let len = end - start;
                    if len == 1 && i == start {
                        set.s.insert(id);
                    } else if len >= 2 && i == start {
                        set.b.insert(id);
                    } else if len >= 2 && i == end - 1 {
                        set.e.insert(id);
                    } else if len >= 2 && start < i && i < end - 1 {
                        set.m.insert(id);
                    }
                }
            }
        }
        sets
    }

    fn worked_lexicon() -> Lexicon {
        Lexicon::from_words(["南京", "市长", "南京市", "长江"])
    }

    fn ids(lex: &Lexicon, words: &[&str]) -> BTreeSet<usize> {
        words
            .iter()
            .map(|w| lex.words().iter().position(|x| x == w).unwrap() + 1)
            .collect()
    }

    #[test]
    fn worked_examples_segment_as_expected() {
        let lex = worked_lexicon();
        let trie = MatchTrie::build(&lex);
        let chars: Vec<char> = "南京市长江大桥".chars().collect();
        let sets = match_bmes(&chars, &trie);
        assert_eq!(sets, brute_force_bmes(&chars, &lex));

        assert_eq!(sets[2].b, ids(&lex, &["市长"]));
        assert!(sets[2].m.is_empty());
        assert_eq!(sets[2].e, ids(&lex, &["南京市"]));
        assert!(sets[2].s.is_empty());

        assert!(sets[1].b.is_empty());
        assert_eq!(sets[1].m, ids(&lex, &["南京市"]));
        assert_eq!(sets[1].e, ids(&lex, &["南京"]));
        assert!(sets[1].s.is_empty());
    }

    #[test]
    fn empty_lexicon_matches_nothing() {
        let lex = Lexicon::from_words(Vec::<String>::new());
        let trie = MatchTrie::build(&lex);
        let chars: Vec<char> = "南京市长江大桥".chars().collect();
        assert!(match_bmes(&chars, &trie)
            .iter()
            .all(|s| s.as_array().iter().all(|x| x.is_empty())));
    }

    #[test]
    fn trie_contains_exactly_the_lexicon() {
        let lex = worked_lexicon();
        let trie = MatchTrie::build(&lex);
        for (i, w) in lex.words().iter().enumerate() {
            let cs: Vec<char> = w.chars().collect();
            assert_eq!(trie.lookup(&cs), Some(i + 1));
        }
        for non in ["南", "京市", "南京市长", "江"] {
            let cs: Vec<char> = non.chars().collect();
            assert_eq!(trie.lookup(&cs), None, "{non}");
        }
        assert_eq!(trie.max_word_len(), 3);
    }

    #[test]
    fn parses_words_with_and_without_vectors() {
        let lex = Lexicon::parse("南京 0.5 -1\n长江\n南京 9 9\n", Path::new("l")).unwrap();
        assert_eq!(lex.words(), &["南京", "长江"]);
        assert_eq!(lex.vector_dim(), Some(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = lex.init_table(2, &mut rng).unwrap();
        assert_eq!(t.row(1), &[0.5, -1.0]);
        assert!(lex.init_table(3, &mut rng).is_err());
        let err = Lexicon::parse("a 1 2\nb 1\n", Path::new("l")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    fn pooled(values: &[&[f64]], set: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let table = g.constant(Tensor::from_rows(values));
        let set: BTreeSet<usize> = set.iter().copied().collect();
        let out = pool_set(&mut g, table, &set).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn pool_set_examples() {
        let table: &[&[f64]] = &[&[9.0, 9.0], &[1.0, -2.0], &[-1.0, 2.0], &[0.5, 0.25]];
        assert_eq!(pooled(table, &[3]), vec![0.5, 0.25]);
        assert_eq!(pooled(table, &[1, 2]), vec![0.0, 0.0]);
        assert_eq!(pooled(table, &[]), vec![9.0, 9.0]);
    }

    fn encoder(lex: &Lexicon, word_dim: usize, out: usize) -> (ParamStore, LexiconEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = LexiconEncoder::new(&mut store, &mut rng, lex, word_dim, out).unwrap();
        (store, enc)
    }

    #[test]
    fn unmatched_position_projects_four_none_rows() {
        let lex = worked_lexicon();
        let trie = MatchTrie::build(&lex);
        let (store, enc) = encoder(&lex, 3, 2);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &store, &[vec!['大']], &trie).unwrap();

        let none = store.value(enc.word_emb).row(NONE_WORD).to_vec();
        let input: Vec<f64> = none.iter().cycle().take(12).copied().collect();
        let w = store.value(enc.proj.weight);
        let b = store.value(enc.proj.bias).data();
        for j in 0..2 {
            let expected: f64 = b[j] + (0..12).map(|k| input[k] * w.data()[k * 2 + j]).sum::<f64>();
            assert!((g.value(out).data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_unmatched_characters_leaves_other_rows() {
        let lex = worked_lexicon();
        let trie = MatchTrie::build(&lex);
        let (store, enc) = encoder(&lex, 4, 3);
        let run = |s: &str| {
            let mut g = Graph::new();
            let out = enc.encode(&mut g, &store, &[s.chars().collect()], &trie).unwrap();
            g.value(out).clone()
        };
        let a = run("南京市长江大桥");
        let b = run("南京市长江桥大");
        for r in 0..5 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lex = worked_lexicon();
        let trie = MatchTrie::build(&lex);
        let (mut store, enc) = encoder(&lex, 3, 2);
        let sentences = vec!["南京市长江大桥".chars().collect::<Vec<_>>(), "长江".chars().collect()];
        let params: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        // Squared output keeps the embedding gradient input-dependent.
        let err = grad_check(&mut store, &params, &GradCheckOptions::default(), |g, s| {
            let out = enc.encode(g, s, &sentences, &trie)?;
            let sq = g.mul(out, out)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    fn arb_lexicon_and_sentence() -> impl Strategy<Value = (Vec<String>, Vec<char>)> {
        let alphabet = prop::sample::select(vec!['a', 'b', 'c', 'd', '南', '京']);
        let word = prop::collection::vec(alphabet.clone(), 1..5).prop_map(|v| v.into_iter().collect::<String>());
        (prop::collection::vec(word, 0..12), prop::collection::vec(alphabet, 0..16))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn trie_matching_equals_brute_force((words, chars) in arb_lexicon_and_sentence()) {
            let lex = Lexicon::from_words(&words);
            let trie = MatchTrie::build(&lex);
            let sets = match_bmes(&chars, &trie);
            prop_assert_eq!(&sets, &brute_force_bmes(&chars, &lex));

            // each occurrence of a length-L word touches exactly L slots
            let mut slots = 0usize;
            let mut expected = 0usize;
            for s in &sets {
                slots += s.b.len() + s.m.len() + s.e.len() + s.s.len();
            }
            for start in 0..chars.len() {
                for (end, _) in trie.matches_from(&chars, start) {
                    expected += end - start;
                }
            }
            // distinct occurrences of the same word at one slot collapse in a set,
            // so the slot count can only be smaller
            prop_assert!(slots <= expected);
        }

        #[test]
        fn pool_set_ignores_enumeration_order(mut ids in prop::collection::vec(1usize..6, 1..6), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            ids.sort();
            ids.dedup();
            let mut g = Graph::new();
            let table = g.constant(Tensor::from_rows(&refs));
            let set: BTreeSet<usize> = ids.iter().copied().collect();
            let out = pool_set(&mut g, table, &set).unwrap();
            let mut reversed = ids.clone();
            reversed.reverse();
            let direct: Vec<f64> = (0..3)
                .map(|j| reversed.iter().map(|&i| rows[i][j]).sum::<f64>() / ids.len() as f64)
                .collect();
            for (a, b) in g.value(out).data().iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
