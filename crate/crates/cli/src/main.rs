//! `cohort-norm` — command-line front end for the score-normalization
//! toolkit: synthetic data generation, cohort-bank initialization,
//! fine-tuning, trial scoring, metric evaluation, and method comparison.
//!
//! Every command is deterministic given its flags (seeds included), and
//! all numeric output is printed with 9 significant digits so runs can be
//! compared with plain `diff`.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.

mod commands;
mod config;
mod errors;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigFile;
use crate::errors::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "cohort-norm", version, about = "Cohort score normalization toolkit")]
struct Cli {
    /// key=value file supplying defaults for the subcommand's flags
    /// (explicit flags win; every key must belong to the subcommand)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding archive plus split manifest and trials
    GenSynth(GenSynthArgs),
    /// Initialize a cohort bank from labeled embeddings
    Init(InitArgs),
    /// Fine-tune a cohort bank (or gate parameters) on labeled embeddings
    Train(TrainArgs),
    /// Score a trial list with a normalization method
    Score(ScoreArgs),
    /// Compute EER / minDCF / CLLR from a score file and labeled trials
    Eval(EvalArgs),
    /// Score several methods across cohort sizes and print a report table
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct GenSynthArgs {
    /// Output archive path (.cnrm binary or .csv); the split manifest and
    /// trial list are written next to it
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Training (cohort) speakers
    #[arg(long)]
    speakers: Option<usize>,
    /// Extra held-out speakers used only in trials
    #[arg(long)]
    eval_speakers: Option<usize>,
    /// Utterances per speaker
    #[arg(long)]
    utts: Option<usize>,
    /// Embedding dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Number of channel (recording-condition) offsets
    #[arg(long)]
    channels: Option<usize>,
    /// Within-speaker noise, per-component sigma
    #[arg(long)]
    within: Option<f64>,
    /// Channel offset scale, per-component sigma
    #[arg(long)]
    shift: Option<f64>,
    /// Extra short-utterance noise, per-component sigma
    #[arg(long)]
    duration_noise: Option<f64>,
    /// Non-target trials per evaluation speaker
    #[arg(long)]
    non_per_speaker: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the committed benchmark configuration instead of the
    /// defaults (explicit flags still override)
    #[arg(long)]
    benchmark: bool,
}

#[derive(Args)]
pub struct InitArgs {
    /// Embedding archive with speaker labels
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Output bank path
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Sub-centers per speaker
    #[arg(long)]
    subcenters: Option<usize>,
    /// Split manifest; when given, only its [train] speakers enter the bank
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Seed for sub-center seeding/jitter
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Embedding archive with speaker labels
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Input bank (from `init`), or a checkpoint to resume — hyperparameters
    /// then come from the checkpoint and only --epochs may change
    #[arg(long, value_name = "PATH")]
    bank: Option<PathBuf>,
    /// Checkpoint output path, rewritten after every epoch
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Final bank export path [default: --out with extension .cnbk]
    #[arg(long, value_name = "PATH")]
    bank_out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate (decays 10% per epoch)
    #[arg(long)]
    lr: Option<f64>,
    /// Top-K cohort size used in the trained objective and at inference
    #[arg(long)]
    k: Option<usize>,
    /// Margin penalty on own-speaker cohort scores
    #[arg(long)]
    margin: Option<f64>,
    /// Margin space: angular or cosine
    #[arg(long)]
    margin_space: Option<String>,
    /// Sub-centers per speaker [default: the bank's]
    #[arg(long)]
    subcenters: Option<usize>,
    /// Logit scale of the impostor-classification loss
    #[arg(long)]
    delta: Option<f64>,
    /// Weight of the impostor-classification loss
    #[arg(long)]
    aic_weight: Option<f64>,
    /// Weight of the calibration loss (0 isolates the classification loss)
    #[arg(long)]
    cllr_weight: Option<f64>,
    /// What is trained: lie (impostor embeddings) or lwb (scalar gates)
    #[arg(long)]
    variant: Option<String>,
    /// Speakers per mini-batch (each contributes one enroll + one test)
    #[arg(long)]
    spb: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sub-center pooling: min or max
    #[arg(long)]
    select: Option<String>,
    /// Use the sign-degenerate positive-target form of the calibration loss
    #[arg(long)]
    positive_target_cllr: bool,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Normalization method: none, znorm, tnorm, snorm, atnorm, asnorm1,
    /// asnorm2, lie_tas, lwb_tas
    #[arg(long)]
    method: Option<String>,
    /// Cohort bank (.cnbk) or trainer checkpoint (.cnck); optional only
    /// for method none
    #[arg(long, value_name = "PATH")]
    cohort: Option<PathBuf>,
    /// Embedding archive covering every trial utterance
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Trial list: `label enroll[,enroll…] test` per line
    #[arg(long, value_name = "PATH")]
    trials: Option<PathBuf>,
    /// Output score file: `enroll test score` per line
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Top-K cohort size for adaptive methods [default: 400, or the
    /// checkpoint's]
    #[arg(long)]
    k: Option<usize>,
    /// Sub-center pooling: min or max [default: min, or the checkpoint's]
    #[arg(long)]
    select: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Score file produced by `score`
    #[arg(long, value_name = "PATH")]
    scores: Option<PathBuf>,
    /// The trial list the scores were computed from (labels required)
    #[arg(long, value_name = "PATH")]
    trials: Option<PathBuf>,
    /// Target prior of the detection cost
    #[arg(long)]
    p_target: Option<f64>,
    /// Miss cost
    #[arg(long)]
    c_miss: Option<f64>,
    /// False-accept cost
    #[arg(long)]
    c_fa: Option<f64>,
    /// Write the DET curve as CSV (p_fa,p_miss,threshold)
    #[arg(long, value_name = "PATH")]
    det_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Embedding archive covering cohort speakers and trial utterances
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Split manifest: [train] speakers form the cohort, trials stay on
    /// [eval] speakers
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Labeled trial list
    #[arg(long, value_name = "PATH")]
    trials: Option<PathBuf>,
    /// Comma-separated methods [default: none,snorm,asnorm1,asnorm2,lie_tas]
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated cohort sizes for adaptive methods
    /// [default: 50,100,200,400]
    #[arg(long)]
    k_sweep: Option<String>,
    /// Also write the table as CSV
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Target prior of the detection cost
    #[arg(long)]
    p_target: Option<f64>,
    // Training knobs for the trainable methods (lie_tas / lwb_tas).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    margin_space: Option<String>,
    #[arg(long)]
    subcenters: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    aic_weight: Option<f64>,
    #[arg(long)]
    cllr_weight: Option<f64>,
    #[arg(long)]
    spb: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    select: Option<String>,
    #[arg(long)]
    positive_target_cllr: bool,
}

/// Cap the worker-thread count when COHORT_NORM_THREADS is set.
fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("COHORT_NORM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| {
        CliError::Usage(format!(
            "COHORT_NORM_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    if n == 0 {
        return Err(CliError::Usage(
            "COHORT_NORM_THREADS must be >= 1".into(),
        ));
    }
    // Only fails if a global pool already exists, which is equally fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let mut cfg = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynth(args) => commands::gen_synth(args, &mut cfg)?,
        Command::Init(args) => commands::init(args, &mut cfg)?,
        Command::Train(args) => commands::train(args, &mut cfg)?,
        Command::Score(args) => commands::score(args, &mut cfg)?,
        Command::Eval(args) => commands::eval(args, &mut cfg)?,
        Command::Compare(args) => commands::compare(args, &mut cfg)?,
    }
    cfg.finish()
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
