//! `trikb`: synthesize features, train, accumulate, answer, evaluate,
//! ensemble, export and benchmark.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use trikb::trainer::{Profile, Stage};
use trikb::Split;

#[derive(Parser, Debug)]
#[command(name = "trikb", version, about = "Multimodal knowledge-triplet engine")]
struct Cli {
    /// Base directory for relative paths.
    #[arg(long, env = "TRIKB_DATA_ROOT", global = true)]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a known answer oracle.
    Synth(SynthArgs),
    /// Train one stage and write a checkpoint.
    Train(TrainArgs),
    /// Extract one triplet per training instance into a knowledge base.
    Accumulate(AccumulateArgs),
    /// Rank answers for every sample of a split.
    Infer(InferArgs),
    /// Score predictions on a split.
    Eval(EvalArgs),
    /// Combine with a partner model's predictions by the distance-gap rule.
    Ensemble(EnsembleArgs),
    /// Write the merged knowledge graph of a knowledge base.
    ExportKg(ExportArgs),
    /// Time extraction and ranking over growing tail tables.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Index of the first class, for disjoint answer sets.
    #[arg(long, default_value_t = 0)]
    class_offset: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Feature manifest.
    #[arg(long)]
    features: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    /// Allow fine-tuning without a pre-trained checkpoint.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_l_transe: bool,
    #[arg(long)]
    no_l_tri: bool,
    #[arg(long)]
    no_l_sem: bool,
    #[arg(long)]
    no_shuffle: bool,
    /// Weight instances by annotator count.
    #[arg(long)]
    weight_by_count: bool,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AccumulateArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Knowledge base whose triplets are carried over.
    #[arg(long)]
    kb_in: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Line-delimited `{"sample_id", "answer"}` records.
    #[arg(long)]
    partner: PathBuf,
    #[arg(long, default_value_t = trikb::inference::DEFAULT_ENSEMBLE_THRESHOLD)]
    m: f64,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated tail-table sizes.
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    /// Use this checkpoint's model instead of a fresh full-width one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error[{}]: {}",
                e.category(),
                e.message().replace('\n', " ")
            );
            ExitCode::from(e.exit_code())
        }
    }
}
