//! `cls2det`: dataset generation, teacher and student training, evaluation,
//! error analysis and gradient checks.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
//! 3 I/O or file format error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cls2det",
    version,
    about = "Classifier-to-detector distillation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a detection dataset and its classification crops.
    GenData(GenDataArgs),
    /// Train the classification teacher on the crop set.
    TrainTeacher(TeacherArgs),
    /// Train the detector, optionally with distillation terms.
    TrainStudent(StudentArgs),
    /// COCO-style metrics of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Detection error decomposition over IoU thresholds 0.50..0.90.
    ErrorAnalysis(EvalArgs),
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    num_train: usize,
    #[arg(long, default_value_t = 200)]
    num_val: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Side of the classification crops (the teacher input size).
    #[arg(long, default_value_t = 32)]
    crop_size: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TeacherArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, metrics and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// categorical, binary or joint.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    no_flip: bool,
}

#[derive(Args)]
struct StudentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Teacher checkpoint; needed by --kd-cls and by --kd-loc with l1/l2.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// categorical or binary.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    kd_cls: bool,
    #[arg(long)]
    kd_loc: bool,
    /// Teacher-free pixel-level localization term.
    #[arg(long)]
    kd_loc0: bool,
    #[arg(long)]
    lambda_kc: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    sampling_size: Option<usize>,
    /// `N` or `HxW`.
    #[arg(long)]
    pool_size: Option<String>,
    /// Comma-separated subset of l0,l1,l2.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    no_flip: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// train or val.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = cls2det::gradsuite::DEFAULT_SEEDS)]
    seeds: usize,
    /// Run only ops whose name contains this string.
    #[arg(long)]
    op: Option<String>,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Adds an op with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainTeacher(a) => commands::train_teacher(a),
        Command::TrainStudent(a) => commands::train_student(a),
        Command::Eval(a) => commands::eval(a),
        Command::ErrorAnalysis(a) => commands::error_analysis(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
