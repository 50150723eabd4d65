mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ngsan::geometry::GsaVariant;
use ngsan::model::EncoderVariant;

#[derive(Debug, Parser)]
#[command(name = "ngsan", version, about = "Relational scene captioning with normalized and geometry-aware self-attention")]
struct Cli {
    /// Root for run directories when a command gets no --out.
    #[arg(long, global = true, env = "NGSAN_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic relational-scene dataset.
    GenData(GenDataArgs),
    /// Train a captioner and write its checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print decoded captions next to the references.
    Decode(DecodeArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts for the encoder variants.
    Params(ParamsArgs),
    /// Dump the content-independent geometric weight surface as CSV.
    SweepGeometry(SweepArgs),
    /// Train and evaluate a grid of encoder variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    n_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Model and schedule overrides shared by `train` and `ablate`.
#[derive(Debug, Args)]
struct ModelArgs {
    /// JSON run config; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    passes_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    variant: Option<EncoderVariant>,
    #[arg(long, value_parser = parse_gsa)]
    gsa: Option<GsaVariant>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=16))]
    beam: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=16))]
    beam: u32,
    /// Number of scenes to decode.
    #[arg(long, default_value_t = 10)]
    limit: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "sa")]
    variant: EncoderVariant,
    #[arg(long, value_parser = parse_gsa, default_value = "qd")]
    gsa: GsaVariant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: perturb one backward path so the check must fail.
    #[arg(long, hide = true)]
    corrupt_backward: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Audit the 512-wide, four-layer configuration.
    #[arg(long)]
    full_scale: bool,
    #[arg(long, default_value_t = 9487)]
    vocab: usize,
    #[arg(long, default_value_t = 2048)]
    feat_dim: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated cells such as `sa,nsa,gsa:ci,ng`.
    #[arg(long)]
    matrix: String,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Fraction of scenes held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_gsa(s: &str) -> Result<GsaVariant, String> {
    GsaVariant::from_short(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
