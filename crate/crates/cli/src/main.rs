//! Command-line frontend: toy training, inference, evaluation, gradient
//! audits, architecture inspection, and synthetic data generation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

mod commands;
mod runcfg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sodawidenet::audit::Scope;
use sodawidenet::config::Variant;
use sodawidenet::error::Error;
use sodawidenet::metrics::EMeasureMode;

use crate::runcfg::{FileConfig, NetworkFlags, TrainFlags};

#[derive(Parser)]
#[command(
    name = "sodawidenet",
    about = "Wide encoder-decoder salient object detection: train, infer, evaluate, audit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for initialization, shuffling, and generation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Deterministic single-threaded execution. Execution is always
    /// single-threaded and deterministic; the flag is accepted for
    /// interface stability.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory for checkpoints, maps, and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Log file path (JSON lines for training).
    #[arg(long, global = true)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest with the saliency (+ contour) objective.
    Train(TrainArgs),
    /// Run a checkpoint over a manifest and write saliency PGMs.
    Infer(InferArgs),
    /// Score a directory of predictions against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient audits.
    Gradcheck(GradcheckArgs),
    /// Print the layer graph, dilation schedule, shapes, and parameters.
    Inspect(InspectArgs),
    /// Generate a synthetic dataset with exact masks.
    Synth(SynthArgs),
}

#[derive(Args)]
struct NetworkArgs {
    /// Network variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Input resolution (multiple of 16).
    #[arg(long)]
    resolution: Option<usize>,
    /// Disable the pyramid attention branch.
    #[arg(long)]
    no_msa: bool,
    /// Disable the dilated aggregation branch in the encoder.
    #[arg(long)]
    no_mrffam: bool,
    /// Disable the dilated aggregation module in the decoder.
    #[arg(long)]
    no_decoder_mrffam: bool,
    /// Disable the local processing branch.
    #[arg(long)]
    no_lpm: bool,
    /// Disable the contour head (saliency-only objective).
    #[arg(long)]
    no_contours: bool,
}

impl NetworkArgs {
    fn flags(&self) -> NetworkFlags {
        NetworkFlags {
            variant: self.variant,
            resolution: self.resolution,
            no_msa: self.no_msa,
            no_mrffam: self.no_mrffam,
            no_decoder_mrffam: self.no_decoder_mrffam,
            no_lpm: self.no_lpm,
            no_contours: self.no_contours,
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    network: NetworkArgs,
    /// Dataset manifest (JSON array of image/mask entries).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epoch index at which the learning rate is multiplied by the factor.
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    #[arg(long)]
    lr_drop_factor: Option<f64>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Window of the per-pixel loss weight map (odd).
    #[arg(long)]
    alpha_window: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of inputs to run.
    #[arg(long)]
    manifest: PathBuf,
    /// Optional resolution check against the checkpoint configuration.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted saliency PGMs named <stem>.pgm.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// F-measure beta squared.
    #[arg(long, default_value_t = 0.3)]
    beta_squared: f64,
    /// E-measure thresholding: max over 256 thresholds or adaptive.
    #[arg(long, default_value = "max", value_parser = parse_e_mode)]
    e_measure: EMeasureMode,
    /// Average per-image F curves instead of pooling P/R over the dataset.
    #[arg(long)]
    per_image_f: bool,
}

fn parse_e_mode(s: &str) -> Result<EMeasureMode, String> {
    match s {
        "max" => Ok(EMeasureMode::Max),
        "adaptive" => Ok(EMeasureMode::Adaptive),
        other => Err(format!("unknown e-measure mode '{other}' (max|adaptive)")),
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Audit scope: primitives, blocks, losses, end-to-end, or all.
    #[arg(long, default_value = "all")]
    scope: String,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    network: NetworkArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples to generate.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Sample resolution in pixels.
    #[arg(long, default_value_t = 96)]
    resolution: usize,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidArgument { .. } => 1,
        Error::Numerical(_) => 3,
        Error::ShapeMismatch { .. } | Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Train(args) => {
            let flags = TrainFlags {
                network: args.network.flags(),
                manifest: args.manifest,
                lr: args.lr,
                epochs: args.epochs,
                lr_drop_epoch: args.lr_drop_epoch,
                lr_drop_factor: args.lr_drop_factor,
                batch: args.batch,
                alpha_window: args.alpha_window,
            };
            let run =
                runcfg::resolve_run(&file, &flags, seed, cli.deterministic, cli.out, cli.log)?;
            commands::cmd_train(&run)
        }
        Command::Infer(args) => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("out"));
            commands::cmd_infer(&args.checkpoint, &args.manifest, &out, args.resolution)
        }
        Command::Eval(args) => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("out"));
            let flags = commands::EvalFlags {
                beta_squared: args.beta_squared,
                e_measure: args.e_measure,
                per_image_f: args.per_image_f,
            };
            commands::cmd_eval(&args.pred, &args.manifest, &out, &flags)
        }
        Command::Gradcheck(args) => {
            let scopes: Vec<Scope> = if args.scope == "all" {
                sodawidenet::audit::all_scopes().to_vec()
            } else {
                vec![args.scope.parse()?]
            };
            commands::cmd_gradcheck(&scopes, seed.unwrap_or(1))
        }
        Command::Inspect(args) => {
            let config = runcfg::resolve_network(&file.network, &args.network.flags())?;
            commands::cmd_inspect(&config, seed.unwrap_or(0))
        }
        Command::Synth(args) => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("synth"));
            commands::cmd_synth(seed.unwrap_or(0), args.count, args.resolution, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
