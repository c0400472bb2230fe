use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-view relation extraction: synthesize corpora, train, evaluate,
/// ablate views, compare fusion strategies and inspect gates.
///
/// Any subcommand accepts `--config FILE` with `key = value` lines naming
/// long flags; flags given on the command line win.
#[derive(Debug, Parser)]
#[command(name = "mvre", version, args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted view-specific cues.
    Synth(SynthArgs),
    /// Train one model and keep the best-dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Train the full model and each single-view removal.
    Ablate(TrainArgs),
    /// Train every fusion strategy under identical seeds and data order.
    CompareFusion(TrainArgs),
    /// Dump per-token gate weights of a move checkpoint.
    InspectGates(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub sentences: usize,
    #[arg(long, default_value_t = 4)]
    pub relations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// semantic, lexicon or radical
    #[arg(long, default_value = "lexicon")]
    pub signal: String,
    /// Comma-separated views that get label-independent cues.
    #[arg(long, default_value = "")]
    pub noise_views: String,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Lexicon file [default: <data>/lexicon.txt]
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Radical dictionary [default: <data>/radicals.tsv]
    #[arg(long)]
    pub radical_dict: Option<PathBuf>,
    /// move, concat or attention
    #[arg(long, default_value = "move")]
    pub fusion: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub hidden: usize,
    /// Comma-separated active views.
    #[arg(long, default_value = "semantic,lexicon,radical")]
    pub views: String,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub biword: Switch,
    /// Sparsify the move gate to its k largest weights when scoring.
    #[arg(long)]
    pub gate_topk: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub warmup_ratio: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// max or mean
    #[arg(long, default_value = "max")]
    pub pooling: String,
    /// What each move expert reads: own-view or full
    #[arg(long, default_value = "own-view")]
    pub expert_input: String,
    /// Check every softmax output and gate row while training.
    #[arg(long)]
    pub debug: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A JSON-lines file, or a corpus directory (then `--split` picks the file).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub gate_topk: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON-lines file to run through the model.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}
