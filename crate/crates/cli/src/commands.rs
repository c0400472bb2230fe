use std::path::{Path, PathBuf};

use serde_json::json;

use mvre_core::data::synth::{synth_generate, SynthConfig};
use mvre_core::data::{load_jsonl, write_jsonl, RelationInstance};
use mvre_core::fusion::{ExpertInput, FusionKind, GateMode};
use mvre_core::lexicon::Lexicon;
use mvre_core::model::{Model, ModelConfig};
use mvre_core::radical::RadicalDictionary;
use mvre_core::train::{self, log_csv, MetricsReport, OptimConfig, TrainConfig, TrainInputs};
use mvre_core::views::parse_view_list;
use mvre_core::{Error, View};

use crate::args::{EvalArgs, InspectArgs, Switch, SynthArgs, TrainArgs};
use crate::manifest::{file_digest, sha256_hex, RunManifest};
use crate::{write_file, CliError};

type CliResult<T = ()> = Result<T, CliError>;

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e).into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    Ok(write_file(path, text.as_bytes())?)
}

fn is_nonempty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|mut it| it.next().is_some())
        .unwrap_or(false)
}

pub fn synth(args: &SynthArgs) -> CliResult {
    let signal: View = args.signal.parse()?;
    let noise_views = parse_view_list(&args.noise_views)?;
    if is_nonempty_dir(&args.out) && !args.force {
        return Err(CliError::Usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            args.out.display()
        )));
    }
    let cfg = SynthConfig {
        n_sentences: args.sentences,
        n_relations: args.relations,
        seed: args.seed,
        signal,
        noise_views,
    };
    let corpus = synth_generate(&cfg)?;
    create_dir(&args.out)?;
    let (train, dev, test) = corpus.split();
    let mut manifest = RunManifest::new("synth", args.seed);
    manifest.flags = vec![
        ("sentences".into(), args.sentences.to_string()),
        ("relations".into(), args.relations.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("signal".into(), signal.to_string()),
        ("noise-views".into(), args.noise_views.clone()),
    ];
    manifest.config = serde_json::to_value(&cfg).map_err(Error::from)?;
    for (name, split) in [("train.jsonl", &train), ("dev.jsonl", &dev), ("test.jsonl", &test)] {
        write_jsonl(&args.out.join(name), split)?;
        manifest.artifacts.push(name.into());
    }
    write_file(&args.out.join("lexicon.txt"), corpus.lexicon_text().as_bytes())?;
    write_file(&args.out.join("radicals.tsv"), corpus.radical_text().as_bytes())?;
    write_json(
        &args.out.join("cues.json"),
        &serde_json::to_value(&corpus.cue_table).map_err(Error::from)?,
    )?;
    manifest.artifacts.extend(["lexicon.txt", "radicals.tsv", "cues.json"].map(String::from));
    manifest.write(&args.out)?;
    println!(
        "wrote {} train / {} dev / {} test sentences to {}",
        train.len(),
        dev.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

/// Everything a training-style command needs, resolved from its flags.
struct Setup {
    model: ModelConfig,
    train: TrainConfig,
    inputs: TrainInputs,
    test: Option<Vec<RelationInstance>>,
    manifest: RunManifest,
}

fn setup(command: &str, args: &TrainArgs) -> CliResult<Setup> {
    let kind: FusionKind = args.fusion.parse()?;
    let views = parse_view_list(&args.views)?;
    if views.is_empty() {
        return Err(CliError::Usage("--views must name at least one view".into()));
    }
    if let Some(k) = args.gate_topk {
        if command != "train" {
            return Err(CliError::Usage(format!("--gate-topk is not supported by {command}")));
        }
        if kind != FusionKind::Move {
            return Err(CliError::Usage(format!(
                "--gate-topk only applies to --fusion move, not {kind}"
            )));
        }
        if k == 0 || k > views.len() {
            return Err(CliError::Usage(format!(
                "--gate-topk must be in 1..={}, got {k}",
                views.len()
            )));
        }
    }
    let lexicon_path = args.lexicon.clone().unwrap_or_else(|| args.data.join("lexicon.txt"));
    let radical_path = args.radical_dict.clone().unwrap_or_else(|| args.data.join("radicals.tsv"));

    let mut model = ModelConfig {
        views: views.clone(),
        biword: args.biword == Switch::On,
        pooling: args.pooling.parse()?,
        seed: args.seed,
        ..ModelConfig::default()
    }
    .with_hidden(args.hidden);
    model.fusion.kind = kind;
    model.fusion.expert_input = args.expert_input.parse::<ExpertInput>()?;
    model.validate()?;
    let train_cfg = TrainConfig {
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        optim: OptimConfig {
            lr: args.lr,
            warmup_ratio: args.warmup_ratio,
            weight_decay: args.weight_decay,
            ..OptimConfig::default()
        },
        debug: args.debug,
    };
    train_cfg.optim.validate()?;

    let train_path = args.data.join("train.jsonl");
    let dev_path = args.data.join("dev.jsonl");
    let test_path = args.data.join("test.jsonl");
    let mut manifest = RunManifest::new(command, args.seed);
    for p in [&train_path, &dev_path, &lexicon_path, &radical_path] {
        manifest.inputs.push(file_digest(p)?);
    }
    let test = if test_path.exists() {
        manifest.inputs.push(file_digest(&test_path)?);
        Some(load_jsonl(&test_path)?)
    } else {
        None
    };
    let inputs = TrainInputs {
        train: load_jsonl(&train_path)?,
        dev: load_jsonl(&dev_path)?,
        lexicon: Lexicon::load(&lexicon_path)?,
        radicals: RadicalDictionary::load(&radical_path)?,
    };
    let path_str = |p: &Path| p.display().to_string();
    manifest.flags = vec![
        ("data".into(), path_str(&args.data)),
        ("lexicon".into(), path_str(&lexicon_path)),
        ("radical-dict".into(), path_str(&radical_path)),
        ("fusion".into(), kind.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("epochs".into(), args.epochs.to_string()),
        ("lr".into(), args.lr.to_string()),
        ("batch-size".into(), args.batch_size.to_string()),
        ("hidden".into(), args.hidden.to_string()),
        (
            "views".into(),
            views.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
        ),
        ("biword".into(), if model.biword { "on" } else { "off" }.into()),
        ("warmup-ratio".into(), args.warmup_ratio.to_string()),
        ("weight-decay".into(), args.weight_decay.to_string()),
        ("pooling".into(), model.pooling.to_string()),
        ("expert-input".into(), args.expert_input.clone()),
        ("debug".into(), args.debug.to_string()),
    ];
    if let Some(k) = args.gate_topk {
        manifest.flags.push(("gate-topk".into(), k.to_string()));
    }
    manifest.config = json!({ "model": model, "train": train_cfg });
    Ok(Setup {
        model,
        train: train_cfg,
        inputs,
        test,
        manifest,
    })
}

fn report_summary(r: &MetricsReport) -> serde_json::Value {
    json!({ "macro_f1": r.macro_f1, "micro_f1": r.micro_f1 })
}

fn write_predictions(path: &Path, preds: &[mvre_core::classifier::Prediction]) -> CliResult {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p).map_err(Error::from)?);
        text.push('\n');
    }
    Ok(write_file(path, text.as_bytes())?)
}

pub fn train_cmd(args: &TrainArgs) -> CliResult {
    let mut s = setup("train", args)?;
    create_dir(&args.out)?;
    s.manifest.artifacts = ["model.ckpt", "train_log.csv", "metrics.json", "predictions.jsonl"]
        .map(String::from)
        .to_vec();
    s.manifest.write(&args.out)?;

    let outcome = train::train(&s.model, &s.train, &s.inputs)?;
    let model = &outcome.best;
    model.save(&args.out.join("model.ckpt"))?;
    write_file(&args.out.join("train_log.csv"), log_csv(&outcome.log).as_bytes())?;

    let dense = GateMode::Dense;
    let train_eval = train::evaluate(model, &s.inputs.train, &dense)?;
    let dev_eval = train::evaluate(model, &s.inputs.dev, &dense)?;
    let mut metrics = json!({
        "best_epoch": outcome.best_epoch,
        "num_parameters": model.num_parameters(),
        "train": train_eval.report,
        "dev": dev_eval.report,
    });
    if args.debug {
        metrics["simplex_rows_checked"] = json!(outcome.simplex_rows_checked);
    }
    let scored = match &s.test {
        Some(test) => {
            let e = train::evaluate(model, test, &dense)?;
            metrics["test"] = serde_json::to_value(&e.report).map_err(Error::from)?;
            e
        }
        None => dev_eval.clone(),
    };
    write_predictions(&args.out.join("predictions.jsonl"), &scored.predictions)?;
    if let Some(k) = args.gate_topk {
        let split = s.test.as_deref().unwrap_or(&s.inputs.dev);
        let sparse = train::evaluate(model, split, &GateMode::TopK(k))?;
        metrics["gate_topk"] = topk_section(k, &scored.pred_ids, &sparse);
    }
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "{}",
        json!({
            "best_epoch": outcome.best_epoch,
            "train": report_summary(&train_eval.report),
            "dev": report_summary(&dev_eval.report),
        })
    );
    Ok(())
}

fn topk_section(k: usize, dense_preds: &[usize], sparse: &train::Evaluation) -> serde_json::Value {
    let changed = dense_preds
        .iter()
        .zip(&sparse.pred_ids)
        .filter(|(a, b)| a != b)
        .count();
    json!({
        "k": k,
        "changed_predictions": changed,
        "metrics": sparse.report,
    })
}

fn resolve_split(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.jsonl"))
    } else {
        data.to_path_buf()
    }
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let model = Model::load(&args.checkpoint)?;
    if let Some(k) = args.gate_topk {
        if model.fusion_kind() != FusionKind::Move {
            return Err(CliError::Usage(format!(
                "--gate-topk needs a move checkpoint, this one uses {}",
                model.fusion_kind()
            )));
        }
        let n = model.config().views.len();
        if k == 0 || k > n {
            return Err(CliError::Usage(format!("--gate-topk must be in 1..={n}, got {k}")));
        }
    }
    let path = resolve_split(&args.data, &args.split);
    let instances = load_jsonl(&path)?;
    let dense = train::evaluate(&model, &instances, &GateMode::Dense)?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("eval", model.config().seed);
    manifest.inputs = vec![file_digest(&args.checkpoint)?, file_digest(&path)?];
    manifest.flags = vec![
        ("checkpoint".into(), args.checkpoint.display().to_string()),
        ("data".into(), args.data.display().to_string()),
        ("split".into(), args.split.clone()),
    ];
    if let Some(k) = args.gate_topk {
        manifest.flags.push(("gate-topk".into(), k.to_string()));
    }
    manifest.artifacts = vec!["eval_metrics.json".into(), "predictions.jsonl".into()];
    manifest.write(&args.out)?;

    let mut metrics = json!({ "split": path.display().to_string(), "metrics": dense.report });
    if let Some(k) = args.gate_topk {
        let sparse = train::evaluate(&model, &instances, &GateMode::TopK(k))?;
        metrics["gate_topk"] = topk_section(k, &dense.pred_ids, &sparse);
    }
    write_predictions(&args.out.join("predictions.jsonl"), &dense.predictions)?;
    write_json(&args.out.join("eval_metrics.json"), &metrics)?;
    let mut line = json!({ "metrics": report_summary(&dense.report) });
    if let Some(section) = metrics.get("gate_topk") {
        line["gate_topk_changed_predictions"] = section["changed_predictions"].clone();
    }
    println!("{line}");
    Ok(())
}

pub fn ablate(args: &TrainArgs) -> CliResult {
    let mut s = setup("ablate", args)?;
    create_dir(&args.out)?;
    s.manifest.artifacts = vec!["ablation.json".into(), "ablation.csv".into()];
    s.manifest.write(&args.out)?;
    let rows = train::ablate_views(&s.model, &s.train, &s.inputs)?;
    let mut csv = String::from("variant,views,dev_macro_f1,dev_micro_f1,best_epoch,num_parameters\n");
    let mut table = Vec::new();
    for row in &rows {
        let views = row.views.iter().map(|v| v.name()).collect::<Vec<_>>().join("+");
        let slug = row.name.replace("w/o ", "wo-");
        let dir = args.out.join(&slug);
        create_dir(&dir)?;
        row.outcome.best.save(&dir.join("model.ckpt"))?;
        write_file(&dir.join("train_log.csv"), log_csv(&row.outcome.log).as_bytes())?;
        let n = row.outcome.best.num_parameters();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.name, views, row.dev.macro_f1, row.dev.micro_f1, row.outcome.best_epoch, n
        ));
        table.push(json!({
            "variant": row.name,
            "views": row.views,
            "checkpoint": format!("{slug}/model.ckpt"),
            "best_epoch": row.outcome.best_epoch,
            "num_parameters": n,
            "dev": row.dev,
        }));
    }
    write_file(&args.out.join("ablation.csv"), csv.as_bytes())?;
    write_json(&args.out.join("ablation.json"), &json!({ "rows": table }))?;
    print!("{csv}");
    Ok(())
}

pub fn compare_fusion(args: &TrainArgs) -> CliResult {
    let mut s = setup("compare-fusion", args)?;
    create_dir(&args.out)?;
    s.manifest.artifacts = vec!["fusion_report.json".into(), "loss_curves.csv".into()];
    s.manifest.write(&args.out)?;
    let cmp = train::compare_fusion(&s.model, &s.train, &s.inputs)?;
    write_file(&args.out.join("loss_curves.csv"), cmp.loss_curves_csv().as_bytes())?;
    let fastest = cmp
        .runs
        .iter()
        .map(|r| r.infer_ms_per_batch)
        .fold(f64::INFINITY, f64::min);
    let mut runs = Vec::new();
    let mut digests = serde_json::Map::new();
    for run in &cmp.runs {
        let dir = args.out.join(run.kind.name());
        create_dir(&dir)?;
        run.outcome.best.save(&dir.join("model.ckpt"))?;
        let order = serde_json::to_vec(&run.outcome.batch_orders).map_err(Error::from)?;
        digests.insert(run.kind.to_string(), json!(sha256_hex(&order)));
        runs.push(json!({
            "strategy": run.kind,
            "dev_macro_f1": run.dev.macro_f1,
            "dev_micro_f1": run.dev.micro_f1,
            "best_epoch": run.outcome.best_epoch,
            "num_parameters": run.num_parameters,
            "infer_ms_per_batch": run.infer_ms_per_batch,
            "relative_infer_time": run.infer_ms_per_batch / fastest,
        }));
    }
    let report = json!({
        "seed_audit": { "passed": cmp.seed_audit, "batch_sequence_sha256": digests },
        "runs": runs,
    });
    write_json(&args.out.join("fusion_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    if !cmp.seed_audit {
        return Err(CliError::Core(Error::Contract(
            "fusion runs saw different batch sequences".into(),
        )));
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn inspect_gates(args: &InspectArgs) -> CliResult {
    let model = Model::load(&args.checkpoint)?;
    let instances = load_jsonl(&args.data)?;
    let gates = model.gate_weights(&instances)?;
    let views = &model.config().views;
    let mut out = String::from("sentence_id,position,char");
    for v in views {
        out.push_str(&format!(",alpha_{v}"));
    }
    out.push('\n');
    for t in &gates {
        out.push_str(&format!("{},{},{}", t.sentence, t.position, csv_field(&t.ch.to_string())));
        for a in &t.alpha {
            out.push_str(&format!(",{a}"));
        }
        out.push('\n');
    }
    let means = train::gate_summary(&gates);
    out.push_str("mean,,");
    for m in &means {
        out.push_str(&format!(",{m}"));
    }
    out.push('\n');
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, out.as_bytes())?;
    let summary: serde_json::Map<String, serde_json::Value> = views
        .iter()
        .zip(&means)
        .map(|(v, m)| (v.to_string(), json!(m)))
        .collect();
    println!("{}", json!({ "tokens": gates.len(), "mean_gate": summary }));
    Ok(())
}
