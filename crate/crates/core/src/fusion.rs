//! Fusion of the per-token view vectors into one feature per token:
//! mixture-of-view-experts (MoVE) and the concat / attention baselines.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, Init, NodeId, ParamId, ParamStore, Tensor};
use crate::views::View;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Move,
    Concat,
    Attention,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Move, FusionKind::Concat, FusionKind::Attention];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Move => "move",
            FusionKind::Concat => "concat",
            FusionKind::Attention => "attention",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "move" => Ok(FusionKind::Move),
            "concat" => Ok(FusionKind::Concat),
            "attention" => Ok(FusionKind::Attention),
            other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

/// What each MoVE expert reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertInput {
    /// Expert `k` reads only the slice of view `k`.
    OwnView,
    /// Every expert reads the whole concatenated feature.
    Full,
}

impl FromStr for ExpertInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "own-view" => Ok(ExpertInput::OwnView),
            "full" => Ok(ExpertInput::Full),
            other => Err(Error::Config(format!("unknown expert input `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub view_dim: usize,
    pub out_dim: usize,
    pub expert_input: ExpertInput,
    /// relu between the two expert layers
    pub expert_relu: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            kind: FusionKind::Move,
            view_dim: 100,
            out_dim: 100,
            expert_input: ExpertInput::OwnView,
            expert_relu: true,
        }
    }
}

/// How the MoVE gate weights are produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GateMode {
    #[default]
    Dense,
    /// Inference-time sparsification of the dense gate.
    TopK(usize),
    /// Every token uses these weights (test hook).
    Fixed(Vec<f64>),
}

/// Concatenates per-token view vectors in the given order.
pub fn concat_views(g: &mut Graph, views: &[NodeId]) -> Result<NodeId> {
    g.concat_cols(views)
}

/// Keeps the `k` largest weights (lower index wins ties), zeroes the rest
/// and renormalizes.
pub fn top_k_gate(alpha: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > alpha.len() {
        return Err(Error::Config(format!(
            "gate top-k must be in 1..={}, got {k}",
            alpha.len()
        )));
    }
    if k == alpha.len() {
        return Ok(alpha.to_vec());
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; alpha.len()];
    for &i in &order[..k] {
        out[i] = alpha[i];
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    } else {
        out[order[0]] = 1.0;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub view: View,
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct MoveFusion {
    pub views: Vec<View>,
    pub experts: Vec<Expert>,
    pub gate: Linear,
    pub cfg: FusionConfig,
}

impl MoveFusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        views: &[View],
        cfg: FusionConfig,
    ) -> Result<Self> {
        let hm_dim = views.len() * cfg.view_dim;
        let expert_in = match cfg.expert_input {
            ExpertInput::OwnView => cfg.view_dim,
            ExpertInput::Full => hm_dim,
        };
        let mut experts = Vec::with_capacity(views.len());
        for &view in views {
            let name = format!("fusion.expert.{view}");
            experts.push(Expert {
                view,
                l1: Linear::new(store, rng, &format!("{name}.l1"), expert_in, expert_in)?,
                l2: Linear::new(store, rng, &format!("{name}.l2"), expert_in, cfg.out_dim)?,
            });
        }
        let gate = Linear::new(store, rng, "fusion.gate", hm_dim, views.len())?;
        Ok(MoveFusion {
            views: views.to_vec(),
            experts,
            gate,
            cfg,
        })
    }

    /// Output of expert `k` for every token, `[n, out_dim]`.
    pub fn expert_output(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_m: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let e = &self.experts[k];
        let input = match self.cfg.expert_input {
            ExpertInput::OwnView => {
                let d = self.cfg.view_dim;
                g.slice_cols(h_m, k * d, (k + 1) * d)?
            }
            ExpertInput::Full => h_m,
        };
        let hidden = e.l1.forward(g, store, input)?;
        let hidden = if self.cfg.expert_relu {
            g.relu(hidden)
        } else {
            hidden
        };
        e.l2.forward(g, store, hidden)
    }

    /// Returns `(h_f [n, out_dim], alpha [n, E])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_m: NodeId,
        mode: &GateMode,
    ) -> Result<(NodeId, NodeId)> {
        let n = g.shape(h_m)[0];
        let n_experts = self.experts.len();
        let alpha = match mode {
            GateMode::Dense => {
                let logits = self.gate.forward(g, store, h_m)?;
                g.softmax(logits, 1)?
            }
            GateMode::TopK(k) => {
                let logits = self.gate.forward(g, store, h_m)?;
                let dense = g.softmax(logits, 1)?;
                let mut sparse = Vec::with_capacity(n * n_experts);
                for row in 0..n {
                    sparse.extend(top_k_gate(g.value(dense).row(row), *k)?);
                }
                g.constant(Tensor::new(vec![n, n_experts], sparse)?)
            }
            GateMode::Fixed(w) => {
                if w.len() != n_experts {
                    return Err(Error::shape("fixed gate", &[w.len()], &[n_experts]));
                }
                let data = w.iter().copied().cycle().take(n * n_experts).collect();
                g.constant(Tensor::new(vec![n, n_experts], data)?)
            }
        };
        let mut h_f = None;
        for k in 0..n_experts {
            let out = self.expert_output(g, store, h_m, k)?;
            let a_k = g.slice_cols(alpha, k, k + 1)?;
            let weighted = g.scale_rows(out, a_k)?;
            h_f = Some(match h_f {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }
        let h_f = h_f.ok_or_else(|| Error::Config("MoVE needs at least one expert".into()))?;
        Ok((h_f, alpha))
    }
}

#[derive(Debug, Clone)]
pub struct ConcatFusion {
    pub lin: Linear,
}

impl ConcatFusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, n_views: usize, cfg: FusionConfig) -> Result<Self> {
        Ok(ConcatFusion {
            lin: Linear::new(store, rng, "fusion.concat", n_views * cfg.view_dim, cfg.out_dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_m: NodeId) -> Result<NodeId> {
        self.lin.forward(g, store, h_m)
    }
}

/// Scaled dot-product attention over the view vectors of each token, with a
/// learned query, shared key and value projections.
#[derive(Debug, Clone)]
pub struct AttentionFusion {
    pub key: Linear,
    pub query: ParamId,
    pub value: Linear,
    pub key_dim: usize,
}

impl AttentionFusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: FusionConfig) -> Result<Self> {
        let key_dim = cfg.out_dim;
        Ok(AttentionFusion {
            key: Linear::new(store, rng, "fusion.attn.key", cfg.view_dim, key_dim)?,
            query: store.init("fusion.attn.query", vec![key_dim, 1], Init::FanIn, rng)?,
            value: Linear::new(store, rng, "fusion.attn.value", cfg.view_dim, cfg.out_dim)?,
            key_dim,
        })
    }

    /// Returns `(output [n, out_dim], weights [n, V])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        let q = g.param(store, self.query);
        let scale = 1.0 / (self.key_dim as f64).sqrt();
        let mut scores = Vec::with_capacity(views.len());
        for &v in views {
            let k = self.key.forward(g, store, v)?;
            let s = g.matmul(k, q)?;
            scores.push(g.scale(s, scale));
        }
        let scores = g.concat_cols(&scores)?;
        let weights = g.softmax(scores, 1)?;
        let mut out = None;
        for (i, &v) in views.iter().enumerate() {
            let val = self.value.forward(g, store, v)?;
            let w = g.slice_cols(weights, i, i + 1)?;
            let weighted = g.scale_rows(val, w)?;
            out = Some(match out {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }
        let out = out.ok_or_else(|| Error::Config("attention over zero views".into()))?;
        Ok((out, weights))
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Move(MoveFusion),
    Concat(ConcatFusion),
    Attention(AttentionFusion),
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub h_f: NodeId,
    /// MoVE gate distribution or attention weights, `[n, V]`.
    pub weights: Option<NodeId>,
}

impl Fusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        views: &[View],
        cfg: FusionConfig,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Config("at least one view is required".into()));
        }
        Ok(match cfg.kind {
            FusionKind::Move => Fusion::Move(MoveFusion::new(store, rng, views, cfg)?),
            FusionKind::Concat => Fusion::Concat(ConcatFusion::new(store, rng, views.len(), cfg)?),
            FusionKind::Attention => Fusion::Attention(AttentionFusion::new(store, rng, cfg)?),
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Move(_) => FusionKind::Move,
            Fusion::Concat(_) => FusionKind::Concat,
            Fusion::Attention(_) => FusionKind::Attention,
        }
    }

    /// `views` are the per-token view features in layout order, each `[n, view_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[NodeId],
        mode: &GateMode,
    ) -> Result<FusionOutput> {
        match self {
            Fusion::Move(m) => {
                let h_m = concat_views(g, views)?;
                let (h_f, alpha) = m.forward(g, store, h_m, mode)?;
                Ok(FusionOutput {
                    h_f,
                    weights: Some(alpha),
                })
            }
            Fusion::Concat(c) => {
                let h_m = concat_views(g, views)?;
                Ok(FusionOutput {
                    h_f: c.forward(g, store, h_m)?,
                    weights: None,
                })
            }
            Fusion::Attention(a) => {
                let (h_f, w) = a.forward(g, store, views)?;
                Ok(FusionOutput {
                    h_f,
                    weights: Some(w),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};

    const VIEWS: [View; 3] = View::ALL;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(kind: FusionKind, input: ExpertInput) -> FusionConfig {
        FusionConfig {
            kind,
            view_dim: 4,
            out_dim: 3,
            expert_input: input,
            expert_relu: true,
        }
    }

    #[test]
    fn concat_views_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let zeros: Vec<NodeId> = (0..3).map(|_| g.constant(Tensor::zeros(vec![1, 100]))).collect();
        let h = concat_views(&mut g, &zeros).unwrap();
        assert_eq!(g.value(h).data(), &[0.0; 300][..]);

        let parts: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 5, 100)).collect();
        let ids: Vec<NodeId> = parts.iter().map(|t| g.constant(t.clone())).collect();
        let h = concat_views(&mut g, &ids).unwrap();
        for r in 0..5 {
            assert_eq!(&g.value(h).row(r)[100..200], parts[1].row(r));
        }
        // per-token: permuting rows of every view permutes h^m rows
        let perm = [4, 2, 0, 1, 3];
        let shuffled: Vec<NodeId> = ids.iter().map(|&i| g.gather_rows(i, &perm).unwrap()).collect();
        let hs = concat_views(&mut g, &shuffled).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(g.value(hs).row(r), g.value(h).row(p));
        }
        let bad = g.constant(Tensor::zeros(vec![2, 100]));
        assert!(concat_views(&mut g, &[ids[0], bad]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let a = [0.5, 0.3, 0.2];
        assert_eq!(top_k_gate(&a, 3).unwrap(), a.to_vec());
        assert_eq!(top_k_gate(&a, 1).unwrap(), vec![1.0, 0.0, 0.0]);
        let two = top_k_gate(&a, 2).unwrap();
        assert!((two[0] - 0.625).abs() < 1e-15 && (two[1] - 0.375).abs() < 1e-15 && two[2] == 0.0);
        assert_eq!(top_k_gate(&[0.4, 0.2, 0.4], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(top_k_gate(&a, 0), Err(Error::Config(_))));
        assert!(top_k_gate(&a, 4).is_err());
    }

    fn build(cfg: FusionConfig, seed: u64) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Fusion::new(&mut store, &mut rng, &VIEWS, cfg).unwrap();
        (store, f)
    }

    #[test]
    fn one_hot_gate_reproduces_expert_exactly() {
        for input in [ExpertInput::OwnView, ExpertInput::Full] {
            let (store, f) = build(small(FusionKind::Move, input), 1);
            let Fusion::Move(m) = &f else { unreachable!() };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut g = Graph::new();
            let h_m = g.constant(random(&mut rng, 6, 12));
            for k in 0..3 {
                let mut w = vec![0.0; 3];
                w[k] = 1.0;
                let (h_f, alpha) = m.forward(&mut g, &store, h_m, &GateMode::Fixed(w)).unwrap();
                let expert = m.expert_output(&mut g, &store, h_m, k).unwrap();
                assert_eq!(g.value(h_f), g.value(expert));
                assert_eq!(g.value(alpha).row(0)[k], 1.0);
            }
        }
    }

    #[test]
    fn identical_experts_make_gate_irrelevant() {
        let (mut store, f) = build(small(FusionKind::Move, ExpertInput::Full), 3);
        let Fusion::Move(m) = &f else { unreachable!() };
        for e in &m.experts[1..] {
            for (src, dst) in [
                (m.experts[0].l1.weight, e.l1.weight),
                (m.experts[0].l1.bias, e.l1.bias),
                (m.experts[0].l2.weight, e.l2.weight),
                (m.experts[0].l2.bias, e.l2.bias),
            ] {
                let v = store.value(src).clone();
                *store.value_mut(dst) = v;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let h_m = g.constant(random(&mut rng, 4, 12));
        let (dense, _) = m.forward(&mut g, &store, h_m, &GateMode::Dense).unwrap();
        let (fixed, _) = m.forward(&mut g, &store, h_m, &GateMode::Fixed(vec![0.1, 0.2, 0.7])).unwrap();
        assert!(g.value(dense).max_abs_diff(g.value(fixed)) < 1e-12);
    }

    #[test]
    fn gate_rows_lie_on_the_simplex() {
        let (store, f) = build(FusionConfig::default(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let views: Vec<NodeId> = (0..3).map(|_| g.constant(random(&mut rng, 7, 100))).collect();
        for mode in [GateMode::Dense, GateMode::TopK(1), GateMode::TopK(2), GateMode::TopK(3)] {
            let out = f.forward(&mut g, &store, &views, &mode).unwrap();
            assert_eq!(g.shape(out.h_f), &[7, 100]);
            let a = g.value(out.weights.unwrap());
            for r in 0..7 {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12 && a.row(r).iter().all(|&x| x >= 0.0));
            }
        }
        // top-k with k = E is the dense gate
        let dense = f.forward(&mut g, &store, &views, &GateMode::Dense).unwrap();
        let full = f.forward(&mut g, &store, &views, &GateMode::TopK(3)).unwrap();
        assert_eq!(g.value(dense.h_f), g.value(full.h_f));
    }

    #[test]
    fn concat_fusion_is_affine() {
        let (mut store, f) = build(small(FusionKind::Concat, ExpertInput::OwnView), 7);
        let Fusion::Concat(c) = &f else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, 3, 12));
        let b = g.constant(random(&mut rng, 3, 12));
        let ab = g.add(a, b).unwrap();
        let fa = c.forward(&mut g, &store, a).unwrap();
        let fb = c.forward(&mut g, &store, b).unwrap();
        let fab = c.forward(&mut g, &store, ab).unwrap();
        let bias = store.value(c.lin.bias).data().to_vec();
        for r in 0..3 {
            for j in 0..3 {
                let lhs = g.value(fab).row(r)[j];
                let rhs = g.value(fa).row(r)[j] + g.value(fb).row(r)[j] - bias[j];
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
        store.value_mut(c.lin.weight).data_mut().fill(0.0);
        store.value_mut(c.lin.bias).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, 2, 12));
        let out = c.forward(&mut g, &store, a).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_has_fewer_parameters_than_move() {
        let count = |kind, input| {
            let cfg = FusionConfig {
                kind,
                expert_input: input,
                ..FusionConfig::default()
            };
            build(cfg, 0).0.num_scalars()
        };
        let concat = count(FusionKind::Concat, ExpertInput::OwnView);
        assert_eq!(concat, 300 * 100 + 100);
        // own-view experts: 3 x (100x100+100 + 100x100+100) + gate 300x3+3
        assert_eq!(count(FusionKind::Move, ExpertInput::OwnView), 3 * 20_200 + 903);
        // full-input experts: 3 x (300x300+300 + 300x100+100) + gate
        assert_eq!(count(FusionKind::Move, ExpertInput::Full), 3 * 120_400 + 903);
        assert!(concat < count(FusionKind::Move, ExpertInput::OwnView));
    }

    #[test]
    fn attention_with_identical_views_returns_value_projection() {
        let (store, f) = build(small(FusionKind::Attention, ExpertInput::OwnView), 9);
        let Fusion::Attention(a) = &f else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let v = g.constant(random(&mut rng, 5, 4));
        let (out, w) = a.forward(&mut g, &store, &[v, v, v]).unwrap();
        let val = a.value.forward(&mut g, &store, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(val)) < 1e-12);
        for r in 0..5 {
            let s: f64 = g.value(w).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_strategy() {
        for (kind, input) in [
            (FusionKind::Move, ExpertInput::OwnView),
            (FusionKind::Move, ExpertInput::Full),
            (FusionKind::Concat, ExpertInput::OwnView),
            (FusionKind::Attention, ExpertInput::OwnView),
        ] {
            let (mut store, f) = build(small(kind, input), 11);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 4, 4)).collect();
            let params: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
            let err = grad_check(&mut store, &params, &GradCheckOptions::default(), |g, s| {
                let views: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let out = f.forward(g, s, &views, &GateMode::Dense)?;
                let t = g.tanh(out.h_f);
                Ok(g.sum(t))
            })
            .unwrap();
            assert!(err <= 1e-4, "{kind} {input:?}: {err}");
        }
    }
}
