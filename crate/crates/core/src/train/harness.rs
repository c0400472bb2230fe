use std::time::Instant;

use super::{evaluate, train, MetricsReport, TrainConfig, TrainInputs, TrainOutcome};
use crate::data::batchify;
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, GateMode};
use crate::model::{ModelConfig, TokenGate};
use crate::tensor::Graph;
use crate::views::View;

/// Runs independent training jobs on scoped threads, keeping input order.
fn run_all(jobs: Vec<(ModelConfig, TrainConfig)>, inputs: &TrainInputs) -> Result<Vec<TrainOutcome>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(m, t)| s.spawn(move || train(m, t, inputs)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    /// `full` or `w/o <view>`
    pub name: String,
    pub views: Vec<View>,
    pub dev: MetricsReport,
    pub outcome: TrainOutcome,
}

/// Trains the full model and one model per removed view, all with the same
/// seed and data order.
pub fn ablate_views(model_cfg: &ModelConfig, cfg: &TrainConfig, inputs: &TrainInputs) -> Result<Vec<AblationRow>> {
    if model_cfg.views.len() < 2 {
        return Err(Error::Config(
            "ablation needs at least two active views; removing the only view leaves none".into(),
        ));
    }
    let mut variants = vec![("full".to_string(), model_cfg.views.clone())];
    for &v in &model_cfg.views {
        let rest: Vec<View> = model_cfg.views.iter().copied().filter(|&w| w != v).collect();
        variants.push((format!("w/o {v}"), rest));
    }
    let jobs = variants
        .iter()
        .map(|(_, views)| {
            let mut m = model_cfg.clone();
            m.views = views.clone();
            (m, cfg.clone())
        })
        .collect();
    let outcomes = run_all(jobs, inputs)?;
    variants
        .into_iter()
        .zip(outcomes)
        .map(|((name, views), outcome)| {
            let dev = evaluate(&outcome.best, &inputs.dev, &GateMode::Dense)?.report;
            Ok(AblationRow {
                name,
                views,
                dev,
                outcome,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FusionRun {
    pub kind: FusionKind,
    pub dev: MetricsReport,
    pub num_parameters: usize,
    /// Mean wall-clock forward time per evaluation batch.
    pub infer_ms_per_batch: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct FusionComparison {
    pub runs: Vec<FusionRun>,
    /// Every strategy saw the identical batch sequence.
    pub seed_audit: bool,
}

impl FusionComparison {
    /// `strategy,epoch,train_loss` rows, one per strategy and epoch.
    pub fn loss_curves_csv(&self) -> String {
        let mut out = String::from("strategy,epoch,train_loss\n");
        for run in &self.runs {
            for r in &run.outcome.log {
                out.push_str(&format!("{},{},{}\n", run.kind, r.epoch, r.train_loss));
            }
        }
        out
    }
}

/// Trains every fusion strategy under identical seeds and data order.
pub fn compare_fusion(model_cfg: &ModelConfig, cfg: &TrainConfig, inputs: &TrainInputs) -> Result<FusionComparison> {
    let jobs = FusionKind::ALL
        .iter()
        .map(|&kind| {
            let mut m = model_cfg.clone();
            m.fusion.kind = kind;
            (m, cfg.clone())
        })
        .collect();
    let outcomes = run_all(jobs, inputs)?;
    let seed_audit = outcomes.windows(2).all(|w| w[0].batch_orders == w[1].batch_orders);
    let timing_split = if inputs.dev.is_empty() { &inputs.train } else { &inputs.dev };
    let mut runs = Vec::with_capacity(outcomes.len());
    for (kind, outcome) in FusionKind::ALL.into_iter().zip(outcomes) {
        let model = &outcome.best;
        let dev = evaluate(model, &inputs.dev, &GateMode::Dense)?.report;
        // timed sequentially, after training, so the runs do not compete
        let batches = batchify(
            timing_split,
            &model.vocab,
            cfg.batch_size,
            None,
            model.config().semantic.max_pos,
        )?;
        let start = Instant::now();
        for batch in &batches {
            let mut g = Graph::new();
            model.forward(&mut g, batch, &GateMode::Dense)?;
        }
        let infer_ms_per_batch = start.elapsed().as_secs_f64() * 1e3 / batches.len().max(1) as f64;
        runs.push(FusionRun {
            kind,
            dev,
            num_parameters: model.num_parameters(),
            infer_ms_per_batch,
            outcome,
        });
    }
    Ok(FusionComparison { runs, seed_audit })
}

/// Mean gate mass per expert over all tokens.
pub fn gate_summary(tokens: &[TokenGate]) -> Vec<f64> {
    let Some(first) = tokens.first() else {
        return Vec::new();
    };
    let mut sums = vec![0.0; first.alpha.len()];
    for t in tokens {
        for (s, a) in sums.iter_mut().zip(&t.alpha) {
            *s += a;
        }
    }
    sums.iter().map(|s| s / tokens.len() as f64).collect()
}
