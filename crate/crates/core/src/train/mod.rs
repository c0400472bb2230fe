//! Optimization loop, evaluation, and the ablation / fusion-comparison
//! harnesses.

mod harness;
pub mod metrics;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::classifier::{self, Prediction};
use crate::data::{batchify, RelationInstance, Vocabularies};
use crate::error::{Error, Result};
use crate::fusion::GateMode;
use crate::lexicon::Lexicon;
use crate::model::{Model, ModelConfig};
use crate::radical::RadicalDictionary;
use crate::tensor::Graph;

pub use harness::{
    ablate_views, compare_fusion, gate_summary, AblationRow, FusionComparison, FusionRun,
};
pub use metrics::{LabelScores, MetricsReport};
pub use optim::{lr_schedule, AdamW, OptimConfig};

/// Tolerance of the debug-mode simplex checks.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Check every softmax output and gate row during training.
    pub debug: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: crate::data::DEFAULT_BATCH_SIZE,
            epochs: 50,
            seed: 0,
            optim: OptimConfig::default(),
            debug: false,
        }
    }
}

/// Corpus splits plus the external resources.
#[derive(Debug, Clone)]
pub struct TrainInputs {
    pub train: Vec<RelationInstance>,
    pub dev: Vec<RelationInstance>,
    pub lexicon: Lexicon,
    pub radicals: RadicalDictionary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best dev epoch (the initial model with 0 epochs).
    pub best: Model,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: Model,
    pub log: Vec<EpochRecord>,
    /// Instance order of every epoch, for seed audits.
    pub batch_orders: Vec<Vec<usize>>,
    /// Rows checked by the debug simplex checks.
    pub simplex_rows_checked: usize,
}

pub fn log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,step,lr,train_loss,dev_macro_f1\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, r.train_loss, r.dev_macro_f1
        ));
    }
    out
}

/// Shuffle seed of one epoch, derived from the run seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn check_rows(values: &[f64], outer: usize, dim: usize, inner: usize, what: &str) -> Result<usize> {
    for o in 0..outer {
        for i in 0..inner {
            let mut total = 0.0;
            for k in 0..dim {
                let v = values[(o * dim + k) * inner + i];
                if !(v >= 0.0) {
                    return Err(Error::Numerical(format!("{what}: negative or NaN entry {v}")));
                }
                total += v;
            }
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Numerical(format!("{what}: row sums to {total}")));
            }
        }
    }
    Ok(outer * inner)
}

/// Verifies that every softmax node on the tape is a distribution along its
/// axis. Returns the number of rows checked.
pub fn check_simplex(g: &Graph) -> Result<usize> {
    let mut rows = 0;
    for (node, axis) in g.softmax_nodes() {
        let t = g.value(node);
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        rows += check_rows(t.data(), outer, shape[axis], inner, "softmax output")?;
    }
    Ok(rows)
}

fn dev_macro_f1(model: &Model, dev: &[RelationInstance]) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(model, dev, &GateMode::Dense)?.report.macro_f1)
}

/// Trains a fresh model. The model seed is taken from `cfg.seed`. The run is
/// a pure function of its inputs.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, inputs: &TrainInputs) -> Result<TrainOutcome> {
    cfg.optim.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if inputs.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let vocab = Vocabularies::build(&inputs.train);
    for inst in &inputs.dev {
        vocab.label_id(&inst.relation)?;
    }
    let mut model_cfg = model_cfg.clone();
    model_cfg.seed = cfg.seed;
    let mut model = Model::new(model_cfg, vocab, inputs.lexicon.clone(), inputs.radicals.clone())?;
    let max_pos = model.config().semantic.max_pos;

    let steps_per_epoch = inputs.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&model.store, cfg.optim);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch_orders = Vec::with_capacity(cfg.epochs);
    let mut simplex_rows = 0;
    let mut step = 0;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        let batches = batchify(
            &inputs.train,
            &model.vocab,
            cfg.batch_size,
            Some(epoch_seed(cfg.seed, epoch)),
            max_pos,
        )?;
        batch_orders.push(batches.iter().flat_map(|b| b.indices.iter().copied()).collect());
        let mut loss_sum = 0.0;
        for batch in &batches {
            model.store.zero_grads();
            let mut g = Graph::new();
            let out = model.forward(&mut g, batch, &GateMode::Dense)?;
            let loss = g.cross_entropy(out.logits, &batch.labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss diverged at epoch {epoch}, step {}",
                    step + 1
                )));
            }
            if cfg.debug {
                simplex_rows += check_simplex(&g)?;
                let logits = g.value(out.logits);
                let probs: Vec<f64> = (0..logits.rows())
                    .flat_map(|r| classifier::probabilities(logits.row(r)))
                    .collect();
                simplex_rows += check_rows(&probs, logits.rows(), logits.cols(), 1, "class probabilities")?;
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.store);
            step += 1;
            lr = lr_schedule(step, total, &cfg.optim)?;
            opt.step(&mut model.store, lr)?;
            loss_sum += value * batch.size() as f64;
        }
        let f1 = dev_macro_f1(&model, &inputs.dev)?;
        log.push(EpochRecord {
            epoch,
            step,
            lr,
            train_loss: loss_sum / inputs.train.len() as f64,
            dev_macro_f1: f1,
        });
        if f1 > best_f1 {
            best_f1 = f1;
            best_epoch = epoch;
            best.store = model.store.clone();
        }
    }
    best.store.zero_grads();
    model.store.zero_grads();
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
        batch_orders,
        simplex_rows_checked: simplex_rows,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub pred_ids: Vec<usize>,
}

/// Scores a split. Every gold relation must be in the model's inventory.
pub fn evaluate(model: &Model, instances: &[RelationInstance], mode: &GateMode) -> Result<Evaluation> {
    let gold: Vec<usize> = instances
        .iter()
        .map(|i| model.vocab.label_id(&i.relation))
        .collect::<Result<_>>()?;
    let probs = model.predict(instances, mode)?;
    let pred_ids: Vec<usize> = probs.iter().map(|p| classifier::argmax(p)).collect();
    let labels = model.vocab.labels.tokens().to_vec();
    let report = MetricsReport::from_predictions(&labels, &gold, &pred_ids)?;
    let predictions = probs
        .into_iter()
        .enumerate()
        .map(|(index, probs)| Prediction {
            index,
            gold: labels[gold[index]].clone(),
            pred: labels[pred_ids[index]].clone(),
            probs,
        })
        .collect();
    Ok(Evaluation {
        report,
        predictions,
        pred_ids,
    })
}
