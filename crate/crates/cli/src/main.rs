//! `hqsnet`: data generation, capture simulation, noise calibration,
//! training, evaluation and inference for the unrolled HQS reconstruction unit.

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hqsnet", version, about = "Learned low-light image reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy classification dataset.
    Datagen(DatagenArgs),
    /// Degrade clean images with blur and Poisson-Gaussian noise.
    Simulate(SimulateArgs),
    /// Fit noise parameters to captures of flat gray patches.
    Calibrate(CalibrateArgs),
    /// Train a reconstruction unit for PSNR on synthetic degradations.
    Pretrain(PretrainArgs),
    /// Train pipeline and/or classifier for classification on degraded data.
    Finetune(FinetuneArgs),
    /// Top-1 accuracy and PSNR on a degraded dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Denoise one image with a trained model.
    Denoise(InferArgs),
    /// Deblur one image with a trained model.
    Deblur(InferArgs),
    /// Write a normalized Gaussian PSF as PFM.
    Psf(PsfArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generation parameters JSON; flags override its fields.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Image file or directory of images.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub noise: PathBuf,
    /// PSF as PFM, or `none`.
    #[arg(long, default_value = "none")]
    pub psf: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub patches: PathBuf,
    /// CSV with header `filename,level` giving each patch's true gray level.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Clean dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional clean validation dataset.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step training log.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Pipeline checkpoint, or `identity`.
    #[arg(long, default_value = "identity")]
    pub model: String,
    /// Classifier checkpoint; a fresh classifier is created when omitted.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Clean dataset directory; degradations follow the config.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of `lowlevel,classifier`; defaults to the config.
    #[arg(long, value_delimiter = ',')]
    pub trainable: Option<Vec<TrainableArg>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum TrainableArg {
    Lowlevel,
    Classifier,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint holding the pipeline (and possibly the classifier).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Checkpoint holding the classifier; defaults to the one in `--model`.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Degraded dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Clean references for PSNR; defaults to the source recorded by `simulate`.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub baseline: Baseline,
    #[arg(long, default_value = "eval.csv")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    /// Use the pipeline from `--model`, if any.
    None,
    /// Replace the pipeline with the identity map.
    Identity,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Side length of the synthetic test image.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PsfArgs {
    /// Odd kernel side length.
    #[arg(long)]
    pub size: usize,
    /// Gaussian standard deviation in pixels.
    #[arg(long)]
    pub std: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Usage mistakes detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INVALID: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(hqsnet::Error::Numerical(_)) = cause.downcast_ref::<hqsnet::Error>() {
            return EXIT_NUMERICAL;
        }
        if let Some(commands::GradcheckFailed) = cause.downcast_ref::<commands::GradcheckFailed>() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_INVALID
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen(a) => commands::datagen(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Denoise(a) => commands::infer(&a, hqsnet::Mode::Denoise),
        Command::Deblur(a) => commands::infer(&a, hqsnet::Mode::Deblur),
        Command::Psf(a) => commands::psf(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
