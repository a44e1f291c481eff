//! `resmask` — train, evaluate, and explain facial-expression classifiers
//! from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use resmask::checkpoint;
use resmask::data::{parse_fer_csv, synthetic_dataset, Dataset, Split, CLASS_NAMES, NUM_CLASSES};
use resmask::error::{Error, Result};
use resmask::eval::{
    accuracy, confusion_csv, confusion_matrix, confusion_table, ensemble_predict, grad_cam,
    predict_all, render_heatmap, CamTarget,
};
use resmask::imageio::{read_pnm, write_ppm, Image};
use resmask::net::{build_network, Network, NetworkSpec};
use resmask::tensor::Scalar;
use resmask::train::{fit, TrainConfig};
use resmask::transform::encode_image;

#[derive(Parser)]
#[command(
    name = "resmask",
    version,
    about = "Residual-masking facial expression classifier",
    long_about = "Train, evaluate, and visually explain a convolutional classifier \
                  for the seven basic facial expressions."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and save the best-validation checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy and confusion matrix
    Eval(EvalArgs),
    /// Classify a single PGM/PPM image
    Infer(InferArgs),
    /// Write a class-activation heatmap for one image
    Gradcam(GradcamArgs),
    /// Average the predictions of several checkpoints
    Ensemble(EnsembleArgs),
    /// Print the architecture table and parameter counts
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CamTargetArg {
    /// The last residual feature map (before masking)
    Residual,
    /// The masked, fused feature map
    Fused,
}

impl From<CamTargetArg> for CamTarget {
    fn from(a: CamTargetArg) -> CamTarget {
        match a {
            CamTargetArg::Residual => CamTarget::Residual,
            CamTargetArg::Fused => CamTarget::Fused,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// FER2013-format CSV file (emotion,pixels,Usage)
    #[arg(long, value_name = "CSV", conflicts_with = "synthetic")]
    data: Option<PathBuf>,

    /// Generate a synthetic dataset with this many samples per class
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,

    /// Which split of the CSV to use
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,

    /// Keep only the first N samples
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// FER2013-format CSV file; trains on its Training split, validates on PublicTest
    #[arg(long, value_name = "CSV", conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,

    /// Train on a synthetic dataset with this many samples per class
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,

    /// Use the reduced architecture (64x64 input, narrow channels)
    #[arg(long)]
    mini: bool,

    /// Where to write the best-validation checkpoint
    #[arg(long, value_name = "PATH", default_value = "model.ckpt")]
    out: PathBuf,

    /// Optional JSON training log
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,

    #[arg(long, default_value_t = 50)]
    epochs: usize,

    #[arg(long, value_name = "N", default_value_t = 48)]
    batch_size: usize,

    #[arg(long, default_value_t = 1e-4)]
    lr: f64,

    #[arg(long, default_value_t = 0.9)]
    momentum: f64,

    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f64,

    /// Disable random flips and rotations
    #[arg(long)]
    no_augment: bool,

    /// Keep only the first N training samples (validation set is capped at N too)
    #[arg(long, value_name = "N")]
    limit: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    #[command(flatten)]
    data: DataArgs,

    #[arg(long, value_name = "N", default_value_t = 48)]
    batch_size: usize,

    /// Write the confusion matrix to this CSV file
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,

    /// Seed for --synthetic data generation
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint to load
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Grayscale (P5) or color (P6) image of a face
    image: PathBuf,

    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args)]
struct GradcamArgs {
    /// Checkpoint to load
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Grayscale (P5) or color (P6) image of a face
    image: PathBuf,

    /// Where to write the heatmap overlay (PPM)
    #[arg(long, value_name = "PATH", default_value = "cam.ppm")]
    out: PathBuf,

    /// Class to explain (name or index 0-6); defaults to the predicted class
    #[arg(long, value_name = "CLASS", value_parser = parse_class)]
    class: Option<usize>,

    /// Feature map to explain
    #[arg(long, value_enum, default_value_t = CamTargetArg::Residual)]
    target: CamTargetArg,

    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Checkpoints to combine (repeat the flag)
    #[arg(long = "checkpoint", value_name = "PATH", required = true)]
    checkpoints: Vec<PathBuf>,

    #[command(flatten)]
    data: DataArgs,

    #[arg(long, value_name = "N", default_value_t = 48)]
    batch_size: usize,

    /// Write the ensemble confusion matrix to this CSV file
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,

    /// Seed for --synthetic data generation
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args)]
struct InspectArgs {
    /// Read the architecture from a checkpoint instead of building it fresh
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Use the reduced architecture
    #[arg(long, conflicts_with = "checkpoint")]
    mini: bool,
}

fn parse_class(s: &str) -> std::result::Result<usize, String> {
    if let Ok(i) = s.parse::<usize>() {
        if i < NUM_CLASSES {
            return Ok(i);
        }
        return Err(format!("class index must be 0-{}", NUM_CLASSES - 1));
    }
    CLASS_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown class {s:?}; expected an index or one of {CLASS_NAMES:?}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => match a.precision {
            Precision::F32 => cmd_train::<f32>(&a),
            Precision::F64 => cmd_train::<f64>(&a),
        },
        Command::Eval(a) => match a.precision {
            Precision::F32 => cmd_eval::<f32>(&a),
            Precision::F64 => cmd_eval::<f64>(&a),
        },
        Command::Infer(a) => match a.precision {
            Precision::F32 => cmd_infer::<f32>(&a),
            Precision::F64 => cmd_infer::<f64>(&a),
        },
        Command::Gradcam(a) => match a.precision {
            Precision::F32 => cmd_gradcam::<f32>(&a),
            Precision::F64 => cmd_gradcam::<f64>(&a),
        },
        Command::Ensemble(a) => match a.precision {
            Precision::F32 => cmd_ensemble::<f32>(&a),
            Precision::F64 => cmd_ensemble::<f64>(&a),
        },
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

/// Resolve an evaluation dataset from --data/--synthetic.
fn eval_dataset(d: &DataArgs, seed: u64) -> Result<Dataset> {
    let mut ds = match (&d.data, d.synthetic) {
        (Some(path), None) => {
            let fer = parse_fer_csv(path)?;
            fer.split(Split::from(d.split)).clone()
        }
        (None, Some(per_class)) => synthetic_dataset(per_class, seed),
        (None, None) => {
            return Err(Error::Usage("pass --data <CSV> or --synthetic <N>".into()))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects --data with --synthetic"),
    };
    if let Some(n) = d.limit {
        ds.truncate(n);
    }
    if ds.is_empty() {
        return Err(Error::DegenerateBatch("the selected dataset is empty".into()));
    }
    Ok(ds)
}

fn cmd_train<T: Scalar>(a: &TrainArgs) -> Result<()> {
    let (mut train_ds, mut val_ds) = match (&a.data, a.synthetic) {
        (Some(path), None) => {
            let fer = parse_fer_csv(path)?;
            (fer.train, fer.val)
        }
        (None, Some(per_class)) => {
            // validation drawn from the same generator, different stream
            let val_per_class = (per_class / 4).max(1);
            (
                synthetic_dataset(per_class, a.seed),
                synthetic_dataset(val_per_class, a.seed.wrapping_add(1)),
            )
        }
        _ => return Err(Error::Usage("pass --data <CSV> or --synthetic <N>".into())),
    };
    if let Some(n) = a.limit {
        train_ds.truncate(n);
        val_ds.truncate(n);
    }

    let spec = if a.mini { NetworkSpec::mini() } else { NetworkSpec::full() };
    let mut net: Network<T> = build_network(&spec, a.seed)?;
    let counts = net.count_parameters();
    println!(
        "network: {} parameters ({} backbone, {} masking), input {}x{}",
        counts.total, counts.backbone, counts.masking, spec.input_size, spec.input_size
    );
    println!("data: {} train / {} val samples", train_ds.len(), val_ds.len());

    let cfg = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        augment: !a.no_augment,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = fit(&mut net, &train_ds, &val_ds, &cfg, Some(&a.out), |r| {
        println!(
            "epoch {:>3}/{}  train_loss {:.4}  val_acc {:.4}  lr {:.3e}",
            r.epoch, a.epochs, r.train_loss, r.val_acc, r.lr
        );
    })?;

    println!(
        "best val_acc {:.4} at epoch {}{}",
        report.best_val_acc,
        report.best_epoch,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    println!("checkpoint written to {}", a.out.display());
    if let Some(log) = &a.log {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Contract(format!("could not serialize the training log: {e}")))?;
        fs::write(log, json).map_err(|e| Error::io(log, e))?;
        println!("training log written to {}", log.display());
    }
    Ok(())
}

fn cmd_eval<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let net: Network<T> = checkpoint::load(&a.checkpoint)?;
    let ds = eval_dataset(&a.data, a.seed)?;
    let (preds, labels) = predict_all(&net, &ds, a.batch_size)?;
    let acc = accuracy(&preds, &labels);
    let m = confusion_matrix(&preds, &labels);
    println!("samples: {}", ds.len());
    println!("accuracy: {acc:.4}");
    println!("{}", confusion_table(&m));
    if let Some(path) = &a.csv {
        fs::write(path, confusion_csv(&m)).map_err(|e| Error::io(path, e))?;
        println!("confusion matrix written to {}", path.display());
    }
    Ok(())
}

fn load_image(path: &Path) -> Result<Image> {
    read_pnm(path)
}

fn cmd_infer<T: Scalar>(a: &InferArgs) -> Result<()> {
    let net: Network<T> = checkpoint::load(&a.checkpoint)?;
    let img = load_image(&a.image)?;
    let x = encode_image::<T>(&img, net.spec().input_size)?;
    let cam = grad_cam(&net, x, None, CamTarget::Residual)?;
    // grad_cam already ran the forward pass; reuse its probabilities
    println!("prediction: {}", CLASS_NAMES[cam.class]);
    for (name, p) in CLASS_NAMES.iter().zip(&cam.probs) {
        println!("  {name:<9} {p:.4}");
    }
    Ok(())
}

fn cmd_gradcam<T: Scalar>(a: &GradcamArgs) -> Result<()> {
    let net: Network<T> = checkpoint::load(&a.checkpoint)?;
    let img = load_image(&a.image)?;
    let x = encode_image::<T>(&img, net.spec().input_size)?;
    let cam = grad_cam(&net, x, a.class, CamTarget::from(a.target))?;
    let overlay = render_heatmap(&img, &cam)?;
    write_ppm(&a.out, &overlay)?;
    println!(
        "explained class: {} (p = {:.4})",
        CLASS_NAMES[cam.class], cam.probs[cam.class]
    );
    println!("heatmap written to {}", a.out.display());
    Ok(())
}

fn cmd_ensemble<T: Scalar>(a: &EnsembleArgs) -> Result<()> {
    let mut nets: Vec<Network<T>> = Vec::with_capacity(a.checkpoints.len());
    for path in &a.checkpoints {
        nets.push(checkpoint::load(path)?);
    }
    let ds = eval_dataset(&a.data, a.seed)?;

    for (path, net) in a.checkpoints.iter().zip(&nets) {
        let (preds, labels) = predict_all(net, &ds, a.batch_size)?;
        println!("member {}: accuracy {:.4}", path.display(), accuracy(&preds, &labels));
    }

    let refs: Vec<&Network<T>> = nets.iter().collect();
    let (preds, labels) = ensemble_predict(&refs, &ds, a.batch_size)?;
    let acc = accuracy(&preds, &labels);
    println!("ensemble of {}: accuracy {:.4}", nets.len(), acc);
    if let Some(path) = &a.csv {
        let m = confusion_matrix(&preds, &labels);
        fs::write(path, confusion_csv(&m)).map_err(|e| Error::io(path, e))?;
        println!("confusion matrix written to {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let spec = match &a.checkpoint {
        Some(path) => {
            let spec = checkpoint::peek_spec(path)?;
            println!("architecture from {}", path.display());
            spec
        }
        None => {
            if a.mini {
                NetworkSpec::mini()
            } else {
                NetworkSpec::full()
            }
        }
    };
    let net: Network<f32> = build_network(&spec, 0)?;

    println!(
        "input: {}x{}x{}   classes: {}",
        spec.input_channels, spec.input_size, spec.input_size, spec.num_classes
    );
    println!("{:<12} {}", "layer", "output shape (per sample)");
    for row in net.describe()? {
        let dims: Vec<String> = row.shape.iter().map(|d| d.to_string()).collect();
        println!("{:<12} {}", row.name, dims.join("x"));
    }
    let counts = net.count_parameters();
    println!();
    println!("parameters: {}", counts.total);
    println!("  backbone: {}", counts.backbone);
    println!("  masking:  {}", counts.masking);
    for (i, n) in counts.masking_per_stage.iter().enumerate() {
        println!("    stage{}: {}", i + 1, n);
    }
    Ok(())
}
