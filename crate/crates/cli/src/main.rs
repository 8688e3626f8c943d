//! Command-line front end: dataset synthesis, training, evaluation, and
//! single-image inference/compositing.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every run is
//! seeded and single-threaded, so repeating a command reproduces its outputs
//! byte for byte.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sgmnet_core::data::{
    composite, load_dataset, load_dataset_with_ids, read_image, save_dataset, synth_dataset,
    write_image, BackgroundStyle, SynthConfig,
};
use sgmnet_core::losses::LossWeights;
use sgmnet_core::metrics::{score_matte, EvalRecord, EvalReport};
use sgmnet_core::model::{infer, Ablation, ModelConfig};
use sgmnet_core::nn::{load_checkpoint, save_checkpoint, ParamStore, SgdConfig};
use sgmnet_core::tensor::Tensor4;
use sgmnet_core::train::{evaluate_model, log_to_csv, train, TrainConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "sgmnet", about = "Trimap-free human matting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic matting dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Run inference over a dataset and write a metric report.
    Eval(EvalArgs),
    /// Predict the alpha matte of one image.
    Infer(InferArgs),
    /// Put the predicted foreground over a new background.
    Composite(CompositeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Square image side; must be a multiple of 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Background plate style: flat, gradient, or noise.
    #[arg(long, default_value = "gradient")]
    background: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (as written by `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config, checkpoints, and the log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 4.0e-5)]
    weight_decay: f64,
    /// Learning-rate multiplier applied every --decay-every epochs.
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    #[arg(long, default_value_t = 10)]
    decay_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Architecture row: i (no probability map), ii (map + deep-feature
    /// feed), iii (map only).
    #[arg(long, default_value = "iii")]
    ablation: String,
    /// Save a numbered checkpoint every N epochs (the final one is always
    /// written).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    /// Mirror samples horizontally at random.
    #[arg(long)]
    hflip: bool,
    /// Half-width of the transition band supervising the detail branch.
    #[arg(long, default_value_t = 3)]
    band_radius: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_s: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda_d: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_alpha: f64,
    /// Five encoder stage widths, comma separated (desk-scale experiments).
    #[arg(long, value_delimiter = ',')]
    encoder_channels: Option<Vec<usize>>,
    /// Probability-map decoder width.
    #[arg(long)]
    fpm_channels: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory with ground-truth mattes.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "use_gt")]
    ckpt: Option<PathBuf>,
    /// Where to write the CSV report.
    #[arg(long)]
    report: PathBuf,
    /// Score the ground truth against itself instead of running the model
    /// (pipeline self-check; aggregates must be zero).
    #[arg(long)]
    use_gt: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Input RGB image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output matte (8-bit grayscale).
    #[arg(long)]
    alpha_out: PathBuf,
}

#[derive(Args)]
struct CompositeArgs {
    /// Input RGB image; doubles as the foreground estimate.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// New background, same dimensions as the input.
    #[arg(long)]
    bg: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sgmnet_core::Error> for Failure {
    fn from(e: sgmnet_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Composite(args) => cmd_composite(args),
    }
}

/// Per-epoch progress lines go to stdout unless SGMNET_LOG=quiet.
fn verbose() -> bool {
    std::env::var("SGMNET_LOG").map_or(true, |v| v != "quiet")
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    if args.size == 0 || !args.size.is_multiple_of(32) {
        return Err(usage(format!(
            "--size must be a positive multiple of 32, got {}",
            args.size
        )));
    }
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let background = BackgroundStyle::from_str(&args.background)
        .map_err(|e| usage(format!("--background: {e}")))?;
    let config = SynthConfig {
        seed: args.seed,
        count: args.count,
        size: args.size,
        background,
        ..SynthConfig::default()
    };
    let samples = synth_dataset(&config)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("synth-config.json"), to_pretty_json(&config)?)?;
    save_dataset(&args.out, &samples)?;
    println!(
        "wrote {} samples ({}x{}) to {}",
        args.count,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

/// Everything needed to replay a training run, written to the run directory
/// before any work starts.
#[derive(Serialize)]
struct TrainRunConfig {
    data: String,
    ablation: String,
    checkpoint_every: usize,
    train: TrainConfig,
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn build_train_config(args: &TrainArgs) -> Result<(TrainConfig, Ablation), Failure> {
    let ablation =
        Ablation::from_str(&args.ablation).map_err(|e| usage(format!("--ablation: {e}")))?;
    let mut model = ModelConfig::default().with_ablation(ablation);
    if let Some(widths) = &args.encoder_channels {
        let w: [usize; 5] = widths.clone().try_into().map_err(|_| {
            usage(format!(
                "--encoder-channels needs exactly 5 values, got {}",
                widths.len()
            ))
        })?;
        model.encoder_channels = w;
    }
    if let Some(fpm) = args.fpm_channels {
        model.fpm_channels = fpm;
    }
    let cfg = TrainConfig {
        model,
        sgd: SgdConfig {
            lr: args.lr,
            momentum: args.momentum,
            weight_decay: args.weight_decay,
            decay_factor: args.decay_factor,
            decay_every: args.decay_every,
        },
        weights: LossWeights {
            lambda_s: args.lambda_s,
            lambda_d: args.lambda_d,
            lambda_alpha: args.lambda_alpha,
        },
        seed: args.seed,
        epochs: args.epochs,
        batch_size: args.batch,
        band_radius: args.band_radius,
        hflip: args.hflip,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((cfg, ablation))
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    if args.checkpoint_every == 0 {
        return Err(usage("--checkpoint-every must be at least 1"));
    }
    let (cfg, ablation) = build_train_config(&args)?;

    std::fs::create_dir_all(&args.out)?;
    let run_config = TrainRunConfig {
        data: args.data.display().to_string(),
        ablation: format!("{ablation:?}").to_lowercase(),
        checkpoint_every: args.checkpoint_every,
        train: cfg.clone(),
    };
    std::fs::write(args.out.join("config.json"), to_pretty_json(&run_config)?)?;

    let samples = load_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let model_json = serde_json::to_value(&cfg.model)?;

    let chatty = verbose();
    let out_dir = args.out.clone();
    let every = args.checkpoint_every;
    let outcome = train(&samples, &cfg, |epoch, store, stats| {
        if chatty {
            println!(
                "epoch {:>4}: total {:.6} (semantic {:.6} detail {:.6} alpha {:.6})",
                epoch, stats.total, stats.l_s, stats.l_d, stats.l_alpha
            );
        }
        if (epoch + 1) % every == 0 {
            let path = out_dir.join(format!("checkpoint-{:04}.ckpt", epoch + 1));
            save_checkpoint(&path, store, Some(&model_json))?;
        }
        Ok(())
    })?;

    save_checkpoint(
        &args.out.join("checkpoint-final.ckpt"),
        &outcome.store,
        Some(&model_json),
    )?;
    std::fs::write(args.out.join("train-log.csv"), log_to_csv(&outcome.log))?;
    println!(
        "trained {} epochs on {} samples; final total loss {:.6}; run directory {}",
        cfg.epochs,
        samples.len(),
        outcome.log.last().map_or(f64::NAN, |s| s.total),
        args.out.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(ParamStore, ModelConfig), Failure> {
    let (store, config) =
        load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let value = config.ok_or_else(|| {
        Failure::Runtime(anyhow!(
            "checkpoint {} carries no model config",
            ckpt.display()
        ))
    })?;
    let model: ModelConfig =
        serde_json::from_value(value).context("model config stored in checkpoint")?;
    model.validate()?;
    Ok((store, model))
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let samples = load_dataset_with_ids(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let report = if args.use_gt {
        let rows = samples
            .iter()
            .map(|(id, s)| {
                Ok(EvalRecord {
                    id: id.clone(),
                    scores: score_matte(&s.alpha, &s.alpha)?,
                })
            })
            .collect::<Result<Vec<_>, sgmnet_core::Error>>()?;
        EvalReport::new(rows)?
    } else {
        let (mut store, model) = load_model(args.ckpt.as_deref().expect("clap enforces --ckpt"))?;
        evaluate_model(&mut store, &model, &samples)?
    };
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.report, report.to_csv())?;
    print!("{}", report.to_table());
    println!("report written to {}", args.report.display());
    Ok(())
}

/// Trim an image to the stride grid the encoder needs, warning when pixels
/// are dropped.
fn crop_to_grid(t: &Tensor4, label: &str) -> Result<Tensor4, Failure> {
    let s = t.shape();
    let (h, w) = (s.h - s.h % 32, s.w - s.w % 32);
    if h == 0 || w == 0 {
        return Err(Failure::Runtime(anyhow!(
            "{label} is {}x{}; the network needs at least 32x32",
            s.h,
            s.w
        )));
    }
    if (h, w) == (s.h, s.w) {
        return Ok(t.clone());
    }
    eprintln!(
        "warning: center-cropping {label} from {}x{} to {h}x{w} (dimensions must be multiples of 32)",
        s.h, s.w
    );
    Ok(t.center_crop(h, w)?)
}

fn read_rgb(path: &Path, label: &str) -> Result<Tensor4, Failure> {
    let t = read_image(path)?;
    if t.shape().c != 3 {
        return Err(Failure::Runtime(anyhow!(
            "{label} {} must be RGB, got {} channel(s)",
            path.display(),
            t.shape().c
        )));
    }
    Ok(t)
}

fn cmd_infer(args: InferArgs) -> Result<(), Failure> {
    let image = crop_to_grid(&read_rgb(&args.image, "input image")?, "input image")?;
    let (mut store, model) = load_model(&args.ckpt)?;
    let alpha = infer(&mut store, &image, &model)?;
    write_image(&args.alpha_out, &alpha)?;
    let s = alpha.shape();
    println!("wrote matte {} ({}x{})", args.alpha_out.display(), s.w, s.h);
    Ok(())
}

fn cmd_composite(args: CompositeArgs) -> Result<(), Failure> {
    let original = read_rgb(&args.image, "input image")?;
    let image = crop_to_grid(&original, "input image")?;
    let bg_raw = read_rgb(&args.bg, "background")?;
    let bg = if bg_raw.shape() == image.shape() {
        bg_raw
    } else if bg_raw.shape() == original.shape() {
        let s = image.shape();
        bg_raw.center_crop(s.h, s.w)?
    } else {
        return Err(Failure::Runtime(anyhow!(
            "background is {:?} but the input image is {:?}",
            bg_raw.shape(),
            original.shape()
        )));
    };
    let (mut store, model) = load_model(&args.ckpt)?;
    let alpha = infer(&mut store, &image, &model)?;
    // The model predicts only the matte, so the input doubles as the
    // foreground plate; accurate where alpha is high, which is where it
    // matters.
    let out = composite(&image, &bg, &alpha)?;
    write_image(&args.out, &out)?;
    println!("wrote composite {}", args.out.display());
    Ok(())
}
