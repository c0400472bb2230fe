//! Sentence pooling, relation scoring and the training loss.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, NodeId, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Pools token rows of `h_f` into one row per sentence. `segments[s]` lists
/// the rows of sentence `s`; an empty segment is an [`Error::EmptyPool`].
pub fn sentence_pool(
    g: &mut Graph,
    h_f: NodeId,
    segments: &[Vec<usize>],
    pooling: Pooling,
) -> Result<NodeId> {
    if segments.iter().any(Vec::is_empty) {
        return Err(Error::EmptyPool);
    }
    match pooling {
        Pooling::Max => g.segment_max(h_f, segments),
        Pooling::Mean => g.segment_mean(h_f, segments),
    }
}

/// `softmax(W H + b)` with `W: [Y, d]`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
    pub num_labels: usize,
}

impl Classifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        num_labels: usize,
    ) -> Result<Self> {
        // Drawn as [d, Y] fan-in and stored transposed, so the scale tracks d.
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = store.init(
            "classifier.weight",
            vec![num_labels, in_dim],
            Init::Uniform(bound),
            rng,
        )?;
        let bias = store.init("classifier.bias", vec![num_labels], Init::Zeros, rng)?;
        Ok(Classifier {
            weight,
            bias,
            num_labels,
        })
    }

    /// Logits `[b, Y]` for pooled sentence features `[b, d]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, pooled: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let wt = g.transpose(w)?;
        let b = g.param(store, self.bias);
        let z = g.matmul(pooled, wt)?;
        g.add(z, b)
    }
}

/// Numerically stable softmax of one logit row.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of `labels` under probability rows.
pub fn loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("loss", &[probs.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let p = *row.get(y).ok_or(Error::Index {
            index: y,
            rows: row.len(),
        })?;
        total -= p.ln();
    }
    Ok(total / labels.len() as f64)
}

/// One line of the prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub gold: String,
    pub pred: String,
    pub probs: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn classifier(d: usize, y: usize) -> (ParamStore, Classifier) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Classifier::new(&mut store, &mut rng, d, y).unwrap();
        (store, c)
    }

    fn probs_of(store: &ParamStore, c: &Classifier, h: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, h.len(), h.to_vec()).unwrap());
        let z = c.logits(&mut g, store, x).unwrap();
        probabilities(g.value(z).row(0))
    }

    #[test]
    fn singleton_and_duplicate_pooling() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, -2.0], &[1.0, -2.0], &[0.5, 3.0]]));
        for p in [Pooling::Max, Pooling::Mean] {
            let one = sentence_pool(&mut g, x, &[vec![2]], p).unwrap();
            assert_eq!(g.value(one).data(), &[0.5, 3.0]);
            let dup = sentence_pool(&mut g, x, &[vec![0, 1]], p).unwrap();
            let single = sentence_pool(&mut g, x, &[vec![0]], p).unwrap();
            assert_eq!(g.value(dup), g.value(single));
        }
        assert!(matches!(
            sentence_pool(&mut g, x, &[vec![0], vec![]], Pooling::Max),
            Err(Error::EmptyPool)
        ));
    }

    #[test]
    fn zero_weights_give_uniform_and_bias_dominates() {
        let (mut store, c) = classifier(3, 4);
        store.value_mut(c.weight).data_mut().fill(0.0);
        let p = probs_of(&store, &c, &[0.3, -1.0, 2.0]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        store.value_mut(c.bias).data_mut()[0] = 10.0;
        assert_eq!(argmax(&probs_of(&store, &c, &[0.3, -1.0, 2.0])), 0);
    }

    #[test]
    fn random_probabilities_sum_to_one() {
        let (store, c) = classifier(5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = probs_of(&store, &c, &h);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn loss_closed_forms() {
        let y = 4;
        let uniform = vec![vec![0.25; y]; 3];
        let l = loss(&uniform, &[0, 2, 3]).unwrap();
        assert!((l - (y as f64).ln()).abs() < 1e-15);
        assert_eq!(loss(&[vec![0.0, 1.0, 0.0, 0.0]], &[1]).unwrap(), 0.0);

        let rows = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.25, 0.25, 0.45, 0.05],
        ];
        let expected = -(0.4f64.ln() + 0.1f64.ln() + 0.45f64.ln()) / 3.0;
        assert!((loss(&rows, &[3, 2, 2]).unwrap() - expected).abs() < 1e-12);
        assert!(loss(&rows, &[3, 2, 4]).is_err());
    }

    #[test]
    fn logit_shift_changes_nothing() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        let (p, q) = (probabilities(&z), probabilities(&shifted));
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(argmax(&p), argmax(&q));
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 4, z.to_vec()).unwrap());
        let b = g.constant(Tensor::matrix(1, 4, shifted).unwrap());
        let la = g.cross_entropy(a, &[1]).unwrap();
        let lb = g.cross_entropy(b, &[1]).unwrap();
        assert!((g.value(la).data()[0] - g.value(lb).data()[0]).abs() < 1e-12);
        assert!(g.value(la).data()[0] > 0.0);
    }

    #[test]
    fn loss_gradient_is_probs_minus_onehot_over_batch() {
        let logits = vec![0.5, -0.3, 1.1, 2.0, 0.0, -1.0];
        let labels = [2, 0];
        let mut g = Graph::new();
        let z = g.variable(Tensor::matrix(2, 3, logits.clone()).unwrap());
        let l = g.cross_entropy(z, &labels).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap().to_vec();
        for (r, &y) in labels.iter().enumerate() {
            let p = probabilities(&logits[r * 3..r * 3 + 3]);
            for k in 0..3 {
                let onehot = if k == y { 1.0 } else { 0.0 };
                assert!((grad[r * 3 + k] - (p[k] - onehot) / 2.0).abs() < 1e-15);
            }
        }
        // finite differences through the pure loss
        let eps = 1e-5;
        for i in 0..logits.len() {
            let eval = |delta: f64| {
                let mut z = logits.clone();
                z[i] += delta;
                let rows: Vec<Vec<f64>> = z.chunks(3).map(probabilities).collect();
                loss(&rows, &labels).unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((numeric - grad[i]).abs() < 1e-8);
        }
    }
}
