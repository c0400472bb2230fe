//! Semantic view: character (+ optional bigram) and entity-position
//! embeddings fed to a bidirectional gated recurrent encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::PAD;
use crate::data::Batch;
use crate::error::Result;
use crate::nn::Linear;
use crate::tensor::{Graph, Init, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticDims {
    pub char_dim: usize,
    pub pos_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub max_pos: usize,
}

impl Default for SemanticDims {
    fn default() -> Self {
        SemanticDims {
            char_dim: 100,
            pos_dim: 20,
            hidden: 100,
            out_dim: 100,
            max_pos: crate::data::DEFAULT_MAX_POS,
        }
    }
}

impl SemanticDims {
    pub fn input_dim(&self) -> usize {
        self.char_dim + 2 * self.pos_dim
    }
}

/// Gated recurrent cell with input, forget and output gates and a tanh
/// candidate. Gate blocks are laid out `[i | f | g | o]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w_x = store.init(format!("{name}.w_x"), vec![input, 4 * hidden], Init::FanIn, rng)?;
        let w_h = store.init(format!("{name}.w_h"), vec![hidden, 4 * hidden], Init::FanIn, rng)?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.insert(format!("{name}.bias"), Tensor::vector(b))?;
        Ok(LstmCell {
            w_x,
            w_h,
            bias,
            hidden,
        })
    }

    /// Runs the cell over `x: [b*t, input]` (batch-major rows) in the given
    /// direction. State is zeroed wherever `mask` is false, so each sentence
    /// starts from a zero state at its first real position in either
    /// direction. Returns `[b*t, hidden]` in the input row order.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: &[bool],
        batch: usize,
        t_max: usize,
        reverse: bool,
    ) -> Result<NodeId> {
        let h = self.hidden;
        let w_x = g.param(store, self.w_x);
        let w_h = g.param(store, self.w_h);
        let bias = g.param(store, self.bias);
        let xw = g.matmul(x, w_x)?;
        let xw = g.add(xw, bias)?;

        let mut h_prev = g.constant(Tensor::zeros(vec![batch, h]));
        let mut c_prev = h_prev;
        let mut outputs = vec![None; t_max];
        let steps: Vec<usize> = if reverse {
            (0..t_max).rev().collect()
        } else {
            (0..t_max).collect()
        };
        for t in steps {
            let rows: Vec<usize> = (0..batch).map(|b| b * t_max + t).collect();
            let m: Vec<f64> = rows.iter().map(|&r| if mask[r] { 1.0 } else { 0.0 }).collect();
            let m = g.constant(Tensor::new(vec![batch, 1], m)?);

            let xt = g.gather_rows(xw, &rows)?;
            let hw = g.matmul(h_prev, w_h)?;
            let z = g.add(xt, hw)?;
            let zi = g.slice_cols(z, 0, h)?;
            let zf = g.slice_cols(z, h, 2 * h)?;
            let zg = g.slice_cols(z, 2 * h, 3 * h)?;
            let zo = g.slice_cols(z, 3 * h, 4 * h)?;
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, c_prev)?;
            let write = g.mul(i, cand)?;
            let c = g.add(keep, write)?;
            let c = g.scale_rows(c, m)?;
            let tc = g.tanh(c);
            let h_new = g.mul(o, tc)?;
            let h_new = g.scale_rows(h_new, m)?;
            outputs[t] = Some(h_new);
            h_prev = h_new;
            c_prev = c;
        }
        // Stack time-major, then reorder rows to batch-major.
        let stacked: Vec<NodeId> = outputs.into_iter().map(|o| o.expect("every step ran")).collect();
        let time_major = g.concat_rows(&stacked)?;
        let perm: Vec<usize> = (0..batch)
            .flat_map(|b| (0..t_max).map(move |t| t * batch + b))
            .collect();
        g.gather_rows(time_major, &perm)
    }
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub dims: SemanticDims,
    pub char_emb: ParamId,
    pub bigram_emb: Option<ParamId>,
    pub head_pos_emb: ParamId,
    pub tail_pos_emb: ParamId,
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub proj: Linear,
}

impl SemanticEncoder {
    /// `bigram_vocab` enables the bigram channel. Its table is drawn from a
    /// separate stream derived from `bigram_seed` so switching the channel on
    /// does not perturb the other initial values.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dims: SemanticDims,
        char_vocab: usize,
        bigram_vocab: Option<(usize, u64)>,
    ) -> Result<Self> {
        let char_emb = store.init(
            "semantic.char_emb",
            vec![char_vocab, dims.char_dim],
            Init::Uniform(0.1),
            rng,
        )?;
        store.freeze_row(char_emb, PAD);
        let n_pos = 2 * dims.max_pos + 1;
        let head_pos_emb = store.init(
            "semantic.head_pos_emb",
            vec![n_pos, dims.pos_dim],
            Init::Uniform(0.1),
            rng,
        )?;
        let tail_pos_emb = store.init(
            "semantic.tail_pos_emb",
            vec![n_pos, dims.pos_dim],
            Init::Uniform(0.1),
            rng,
        )?;
        let forward = LstmCell::new(store, rng, "semantic.lstm_fwd", dims.input_dim(), dims.hidden)?;
        let backward = LstmCell::new(store, rng, "semantic.lstm_bwd", dims.input_dim(), dims.hidden)?;
        let proj = Linear::new(store, rng, "semantic.proj", 2 * dims.hidden, dims.out_dim)?;
        let bigram_emb = match bigram_vocab {
            Some((n, seed)) => {
                let mut brng = ChaCha8Rng::seed_from_u64(seed);
                let id = store.init(
                    "semantic.bigram_emb",
                    vec![n, dims.char_dim],
                    Init::Uniform(0.1),
                    &mut brng,
                )?;
                store.freeze_row(id, PAD);
                Some(id)
            }
            None => None,
        };
        Ok(SemanticEncoder {
            dims,
            char_emb,
            bigram_emb,
            head_pos_emb,
            tail_pos_emb,
            forward,
            backward,
            proj,
        })
    }

    /// `[b*t, char_dim + 2*pos_dim]`: char (+bigram), head-position and
    /// tail-position embeddings; padded positions are all-zero rows.
    pub fn embed_input(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<NodeId> {
        let chars = g.param(store, self.char_emb);
        let mut ch = g.gather_rows(chars, &batch.char_ids)?;
        if let Some(bi) = self.bigram_emb {
            let table = g.param(store, bi);
            let bg = g.gather_rows(table, &batch.bigram_ids)?;
            ch = g.add(ch, bg)?;
        }
        let head_table = g.param(store, self.head_pos_emb);
        let head = g.gather_rows(head_table, &batch.head_pos)?;
        let tail_table = g.param(store, self.tail_pos_emb);
        let tail = g.gather_rows(tail_table, &batch.tail_pos)?;
        let joined = g.concat_cols(&[ch, head, tail])?;
        let mask: Vec<f64> = batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mask = g.constant(Tensor::new(vec![mask.len(), 1], mask)?);
        g.scale_rows(joined, mask)
    }

    /// Bidirectional recurrence over an embedded batch; returns
    /// `[b*t, out_dim]` (pad rows are computed but carry no information).
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embedded: NodeId,
        batch: &Batch,
    ) -> Result<NodeId> {
        let b = batch.size();
        let fwd = self
            .forward
            .run(g, store, embedded, &batch.mask, b, batch.t_max, false)?;
        let bwd = self
            .backward
            .run(g, store, embedded, &batch.mask, b, batch.t_max, true)?;
        let both = g.concat_cols(&[fwd, bwd])?;
        self.proj.forward(g, store, both)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, RelationInstance, Span, Vocabularies};
    use crate::tensor::{grad_check, GradCheckOptions};

    fn small_dims() -> SemanticDims {
        SemanticDims {
            char_dim: 4,
            pos_dim: 2,
            hidden: 3,
            out_dim: 5,
            max_pos: 4,
        }
    }

    fn setup(texts: &[&str], dims: SemanticDims, bigram: bool) -> (Vec<RelationInstance>, Vocabularies, ParamStore, SemanticEncoder) {
        let insts: Vec<RelationInstance> = texts
            .iter()
            .map(|t| RelationInstance::new(t, Span::new(0, 1), Span::new(1, 2), "r").unwrap())
            .collect();
        let vocab = Vocabularies::build(&insts);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bi = bigram.then_some((vocab.bigrams.len(), 99));
        let enc = SemanticEncoder::new(&mut store, &mut rng, dims, vocab.chars.len(), bi).unwrap();
        (insts, vocab, store, enc)
    }

    fn run(enc: &SemanticEncoder, store: &ParamStore, batch: &Batch) -> Tensor {
        let mut g = Graph::new();
        let e = enc.embed_input(&mut g, store, batch).unwrap();
        let out = enc.encode(&mut g, store, e, batch).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn pad_rows_embed_to_zero_and_duplicates_match() {
        let (insts, vocab, store, enc) = setup(&["ABCD", "AB", "ABCD"], SemanticDims::default(), false);
        let batch = make_batch(&insts, &[0, 1, 2], &vocab, 50).unwrap();
        let mut g = Graph::new();
        let e = enc.embed_input(&mut g, &store, &batch).unwrap();
        let v = g.value(e);
        assert_eq!(v.shape(), &[12, 140]);
        assert!(v.row(6).iter().all(|&x| x == 0.0));
        assert!(v.row(7).iter().all(|&x| x == 0.0));
        for t in 0..4 {
            assert_eq!(v.row(t), v.row(8 + t));
        }
        let out = run(&enc, &store, &batch);
        assert_eq!(out.shape(), &[12, 100]);
        assert!(out.is_finite());
    }

    #[test]
    fn appending_pads_leaves_real_rows_bit_identical() {
        let (insts, vocab, store, enc) = setup(&["ABC", "ABCDEFG"], SemanticDims::default(), true);
        let alone = run(&enc, &store, &make_batch(&insts, &[0], &vocab, 50).unwrap());
        let padded = run(&enc, &store, &make_batch(&insts, &[0, 1], &vocab, 50).unwrap());
        for t in 0..3 {
            let a: Vec<u64> = alone.row(t).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = padded.row(t).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "row {t}");
        }
    }

    #[test]
    fn zero_network_outputs_projection_bias() {
        let (insts, vocab, mut store, enc) = setup(&["ABC"], SemanticDims::default(), false);
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let bias: Vec<f64> = (0..100).map(|i| 0.5 - i as f64 * 0.01).collect();
        store.value_mut(enc.proj.bias).data_mut().copy_from_slice(&bias);
        let out = run(&enc, &store, &make_batch(&insts, &[0], &vocab, 50).unwrap());
        for t in 0..3 {
            assert_eq!(out.row(t), &bias[..]);
        }
    }

    #[test]
    fn tied_cells_on_a_palindrome_give_reversed_outputs() {
        let dims = small_dims();
        let insts = vec![RelationInstance::new("ABCBA", Span::new(0, 1), Span::new(4, 5), "r").unwrap()];
        let vocab = Vocabularies::build(&insts);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = SemanticEncoder::new(&mut store, &mut rng, dims, vocab.chars.len(), None).unwrap();
        // Tie the backward cell to the forward one, make the position
        // channels position-independent and the projection symmetric in its
        // two halves.
        for (src, dst) in [
            (enc.forward.w_x, enc.backward.w_x),
            (enc.forward.w_h, enc.backward.w_h),
            (enc.forward.bias, enc.backward.bias),
        ] {
            let v = store.value(src).clone();
            *store.value_mut(dst) = v;
        }
        for table in [enc.head_pos_emb, enc.tail_pos_emb] {
            let t = store.value_mut(table);
            let first = t.row(0).to_vec();
            for chunk in t.data_mut().chunks_mut(dims.pos_dim) {
                chunk.copy_from_slice(&first);
            }
        }
        let h = dims.hidden;
        let w = store.value(enc.proj.weight).clone();
        let wd = store.value_mut(enc.proj.weight).data_mut();
        for r in 0..h {
            for c in 0..dims.out_dim {
                wd[(h + r) * dims.out_dim + c] = w.data()[r * dims.out_dim + c];
            }
        }
        let out = run(&enc, &store, &make_batch(&insts, &[0], &vocab, dims.max_pos).unwrap());
        for t in 0..5 {
            for (a, b) in out.row(t).iter().zip(out.row(4 - t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn biword_flag_off_matches_model_without_channel() {
        let (insts, vocab, store, enc) = setup(&["ABCA"], SemanticDims::default(), false);
        let (_, _, store_b, enc_b) = setup(&["ABCA"], SemanticDims::default(), true);
        let batch = make_batch(&insts, &[0], &vocab, 50).unwrap();
        // Every shared parameter starts identical.
        for (_, p) in store.iter() {
            assert_eq!(store_b.by_name(&p.name).unwrap().value, p.value);
        }
        assert!(enc_b.bigram_emb.is_some());
        let a = run(&enc, &store, &batch);
        let b = run(&enc_b, &store_b, &batch);
        assert_ne!(a, b);
    }

    #[test]
    fn gradients_flow_only_to_used_char_rows() {
        let (insts, vocab, mut store, enc) = setup(&["ABCDE", "FG"], small_dims(), false);
        let batch = make_batch(&insts, &[0], &vocab, small_dims().max_pos).unwrap();
        store.zero_grads();
        let mut g = Graph::new();
        let e = enc.embed_input(&mut g, &store, &batch).unwrap();
        let out = enc.encode(&mut g, &store, e, &batch).unwrap();
        let s = g.sum(out);
        g.backward(s).unwrap();
        g.accumulate_param_grads(&mut store);
        let grad = store.grad(enc.char_emb);
        let d = small_dims().char_dim;
        let used = [vocab.char_id('A'), vocab.char_id('B'), vocab.char_id('C'), vocab.char_id('D'), vocab.char_id('E')];
        for row in 0..vocab.chars.len() {
            let nz = grad[row * d..(row + 1) * d].iter().any(|&x| x != 0.0);
            assert_eq!(nz, used.contains(&row), "row {row}");
        }
    }

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let (insts, vocab, mut store, enc) = setup(&["ABCDE", "AB"], small_dims(), true);
        let batch = make_batch(&insts, &[0, 1], &vocab, small_dims().max_pos).unwrap();
        let params: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let err = grad_check(&mut store, &params, &GradCheckOptions::default(), |g, s| {
            let e = enc.embed_input(g, s, &batch)?;
            let out = enc.encode(g, s, e, &batch)?;
            let t = g.tanh(out);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
