mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{DataArgs, ModelArgs, TrainArgs, UsageError};

#[derive(Parser, Debug)]
#[command(name = "imgmix", version, about = "Image-to-image MLP-mixer training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key=value file supplying defaults; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a residual denoiser
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Denoise one image with a trained checkpoint
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a noisy set
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the exact parameter count of a configuration
    CountParams {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit untrained networks to an image, noise, and image plus noise
    Bias {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Reference image (converted to grayscale); a procedural scene otherwise
        #[arg(long)]
        image: Option<PathBuf>,
        /// Noise standard deviation on the 8-bit scale
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Fixed step size; swept over 1e-2, 1e-1, 1 when absent
        #[arg(long)]
        lr: Option<f64>,
        /// Steps per learning-rate probe
        #[arg(long)]
        probe_iters: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a compressive-sensing refiner on coarse reconstructions
    CsTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        accel: Option<f64>,
        /// hadamard or dct
        #[arg(long)]
        transform: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare refined and coarse reconstructions
    CsEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        operator: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Forward-pass throughput per batch size
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated batch sizes
        #[arg(long)]
        batches: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// f32 or f64
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of full-model gradients
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        tol: Option<f64>,
        /// Number of seeds, starting at --seed
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(e) = err.downcast_ref::<imgmix::Error>() {
        if e.is_numerical() {
            return 3;
        }
        if matches!(e, imgmix::Error::Config(_)) {
            return 2;
        }
    }
    if err.downcast_ref::<commands::NumericalFailure>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
