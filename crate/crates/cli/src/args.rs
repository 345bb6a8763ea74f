use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfx_core::training::Phase;

#[derive(Parser, Debug)]
#[command(
    name = "rfx",
    version,
    about = "Bounded-mask residual forensics for synthetic music detection",
    after_help = "Exit codes: 0 success, 1 evaluation failure, 2 configuration or environment error."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random draw
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads for all internal pools [default: available parallelism]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// Machine mode: no progress or summary lines on stderr
    #[arg(long, global = true, default_value_t = false)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dump per-segment forensic feature tensors of one track
    Features(FeaturesArgs),
    /// Score tracks and print song probabilities with verdicts
    Infer(InferArgs),
    /// Run one training phase on a synthetic task or a manifest
    Train(TrainArgs),
    /// Evaluate prediction files against a manifest and emit a report
    Bench(BenchArgs),
    /// ROC sweep over thresholds as CSV
    Roc(RocArgs),
    /// Per-subset PASS/FAIL gates
    Sanity(SanityArgs),
    /// Score every manifest track under every codec variant
    CodecSweep(CodecSweepArgs),
    /// Effective bandwidth of residuals, per track and per generator
    Bandwidth(BandwidthArgs),
    /// Replace feature channels by training means and report the F1 change
    Ablate(AblateArgs),
    /// Finite-difference gradient checks of every layer and both models
    Gradcheck(GradcheckArgs),
}

pub fn parse_tau(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("threshold must lie in [0, 1], got {t}"))
    }
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: rfx_core::Error| e.to_string())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OriginArg {
    Train,
    Test,
    All,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    /// 2048-sample segments, 128-point STFT, 16 mels
    Toy,
    /// 4 s segments at 44.1 kHz, 2048-point STFT, 128 mels
    Full,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BankArg {
    /// Encoders run as external programs
    External,
    /// In-process band-limiting plus dither stand-ins
    Simulated,
    /// Every variant returns the input unchanged
    Identity,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Momentum,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DeltaLevel {
    Song,
    Segment,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// Model weights (ANW1)
    #[arg(long)]
    pub weights: PathBuf,
    /// Input WAV file
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Feature dump: per segment a u32 header (channels, mels, frames) then f32 values
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the 103-entry track descriptor as JSON
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Model weights (ANW1)
    #[arg(long)]
    pub weights: PathBuf,
    /// Input WAV files
    #[arg(long = "in", required_unless_present = "manifest")]
    pub inputs: Vec<PathBuf>,
    /// Score every manifest entry instead of --in files
    #[arg(long, conflicts_with = "inputs")]
    pub manifest: Option<PathBuf>,
    /// Write prediction records (JSON lines) here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Song-level decision threshold
    #[arg(long, default_value_t = 0.5, value_parser = parse_tau)]
    pub tau: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Phase to run: 1 (distillation), cnn (classifier fit), 2 (steering), 3 (codec-aware)
    #[arg(long, value_parser = parse_phase)]
    pub phase: Phase,
    /// Starting weights; phases cnn, 2 and 3 need a trained residual extractor
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Frozen classifier weights; required by phase 2
    #[arg(long)]
    pub cnn_weights: Option<PathBuf>,
    /// Output weights
    #[arg(long)]
    pub out: PathBuf,
    /// Shapes used when no --weights are given
    #[arg(long, value_enum, default_value_t = PipelineArg::Toy)]
    pub pipeline: PipelineArg,
    /// Labeled training tracks; a synthetic set is generated when absent
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Size of the synthetic labeled set
    #[arg(long, default_value_t = 32)]
    pub items: usize,
    /// Teacher pairs for phase 1
    #[arg(long, default_value_t = 64)]
    pub pairs: usize,
    /// Artifact energy fraction of synthetic AI items
    #[arg(long, default_value_t = 0.2)]
    pub artifact_fraction: f64,
    /// Optimizer steps
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Learning rate [default: 1: 0.02, cnn: 0.005, 2: 0.002, 3: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size; in phase 3 counted in tracks, each carrying four codecs
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Update rule
    #[arg(long, value_enum, default_value_t = OptimizerArg::Momentum)]
    pub optimizer: OptimizerArg,
    /// Global gradient-norm ceiling; 0 disables clipping
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Loss curve output (JSON lines)
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
    /// Codec bank for phase 3
    #[arg(long, value_enum, default_value_t = BankArg::Simulated)]
    pub bank: BankArg,
    /// Encoder command templates (JSON) for the external bank
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Scratch directory for external encoders [default: a temporary directory]
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    /// Held-out synthetic tracks for the phase 3 cross-codec spread
    #[arg(long, default_value_t = 16)]
    pub held_out: usize,
}

#[derive(Args, Debug)]
pub struct EvalInputs {
    /// Manifest (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prediction file, optionally named as MODEL=PATH; the first one is evaluated, all enter the accounting
    #[arg(long = "pred", required = true)]
    pub preds: Vec<String>,
    /// Song-level decision threshold
    #[arg(long, default_value_t = 0.5, value_parser = parse_tau)]
    pub tau: f64,
    /// Manifest partition to evaluate
    #[arg(long, value_enum, default_value_t = OriginArg::All)]
    pub origin: OriginArg,
}

#[derive(Args, Debug)]
pub struct SanityGates {
    /// Minimum TPR of AI subsets
    #[arg(long, default_value_t = 0.90)]
    pub ai_min_tpr: f64,
    /// Minimum TPR of subsets matching --hard-pattern
    #[arg(long, default_value_t = 0.60)]
    pub hard_ai_min_tpr: f64,
    /// Maximum FPR of real subsets
    #[arg(long, default_value_t = 0.05)]
    pub real_max_fpr: f64,
    /// Subset-name pattern for the relaxed AI gate (repeatable)
    #[arg(long = "hard-pattern", default_value = "stable audio")]
    pub hard_patterns: Vec<String>,
    /// Exit 1 when any subset fails
    #[arg(long, default_value_t = false)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[command(flatten)]
    pub gates: SanityGates,
    /// Report path (JSON); CSV companions are written next to it
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RocArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    /// CSV output [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SanityArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[command(flatten)]
    pub gates: SanityGates,
}

#[derive(Args, Debug)]
pub struct CodecSweepArgs {
    /// Model weights (ANW1)
    #[arg(long)]
    pub weights: PathBuf,
    /// Manifest (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated variants
    #[arg(long, default_value = "wav,mp3-128,mp3-320,aac-128,opus-128,opus-192")]
    pub variants: String,
    #[arg(long, value_enum, default_value_t = BankArg::External)]
    pub bank: BankArg,
    /// Encoder command templates (JSON); tools are looked up in $ARTIFACT_ENCODER_DIR first
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Scratch directory for encoder outputs [default: a temporary directory]
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    /// Song-level decision threshold
    #[arg(long, default_value_t = 0.5, value_parser = parse_tau)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = OriginArg::All)]
    pub origin: OriginArg,
    /// Probabilities entering the cross-codec spread
    #[arg(long, value_enum, default_value_t = DeltaLevel::Song)]
    pub delta_level: DeltaLevel,
    /// Per-variant table as CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-variant prediction files
    #[arg(long)]
    pub predictions_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BandwidthArgs {
    /// Manifest (JSON lines); groups come from `generator`, real tracks form the human group
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model weights; the residual is the model's bounded-mask residual
    #[arg(long, required_unless_present = "residual_audio")]
    pub weights: Option<PathBuf>,
    /// Manifest paths already hold residual audio
    #[arg(long, default_value_t = false)]
    pub residual_audio: bool,
    #[arg(long, value_enum, default_value_t = OriginArg::All)]
    pub origin: OriginArg,
    /// Per-track CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grouped table as CSV
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Model weights (ANW1)
    #[arg(long)]
    pub weights: PathBuf,
    /// Channel index 0..7
    #[arg(long, required_unless_present = "all")]
    pub channel: Option<usize>,
    /// Ablate every channel in turn
    #[arg(long, default_value_t = false, conflicts_with = "channel")]
    pub all: bool,
    /// Labeled tracks; means come from the train partition, metrics from the test partition
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Size of each synthetic set when no manifest is given
    #[arg(long, default_value_t = 32)]
    pub items: usize,
    /// Artifact energy fraction of synthetic AI items
    #[arg(long, default_value_t = 0.2)]
    pub artifact_fraction: f64,
    /// Decision threshold
    #[arg(long, default_value_t = 0.5, value_parser = parse_tau)]
    pub tau: f64,
    /// Rows as JSON lines
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}
