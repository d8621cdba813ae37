use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldhnet_core::checkpoint::Checkpoint;
use ldhnet_core::dataset::{load_manifest, PHANTOM_SIZE};
use ldhnet_core::model::ModelConfig;
use ldhnet_core::optim::{AdamWConfig, BiasCorrection};
use ldhnet_core::train::{cmd_augment_preview, cmd_eval, cmd_synth, cmd_train, RunConfig};
use ldhnet_core::{Error, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "ldhnet", version, about = "Lumbar disc herniation classifier: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset with its manifest.
    Synth(SynthArgs),
    /// Write augmented versions of the first study of a manifest.
    AugmentPreview(PreviewArgs),
    /// Cross-validated training with checkpoints and a CSV log.
    Train(TrainArgs),
    /// Score a manifest with a checkpoint and write metrics and curves.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_patients: usize,
    #[arg(long, default_value_t = 0.63)]
    prevalence: f64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = PHANTOM_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Train a single fold instead of all of them.
    #[arg(long)]
    fold_index: Option<usize>,
    /// Holdout fraction when --folds is 1.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 1)]
    aug_multiplier: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    reduction_r: usize,
    #[arg(long, default_value_t = 4)]
    cardinality: usize,
    /// Stem width; stage widths are 2×, 4×, 8×, 16× this.
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long)]
    no_batch_norm: bool,
    /// De-bias Adam moments with (1 − β) instead of (1 − βᵗ).
    #[arg(long)]
    paper_literal_bias_correction: bool,
    /// Continue from the last checkpoint of each fold in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let studies = load_manifest(&a.manifest)?;
    let size = studies
        .first()
        .ok_or_else(|| Error::Invalid("manifest has no studies".into()))?
        .size()?;
    let mut model = ModelConfig::scaled(a.base_channels, a.cardinality, size);
    model.reduction = a.reduction_r;
    model.use_batch_norm = !a.no_batch_norm;
    let cfg = RunConfig {
        manifest: Some(a.manifest.clone()),
        seed: a.seed,
        epochs: a.epochs,
        batch_size: a.batch_size,
        folds: a.folds,
        fold_index: a.fold_index,
        val_fraction: a.val_fraction,
        aug_multiplier: a.aug_multiplier,
        threshold: 0.5,
        model,
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            bias_correction: if a.paper_literal_bias_correction {
                BiasCorrection::PaperLiteral
            } else {
                BiasCorrection::Standard
            },
            ..AdamWConfig::default()
        },
    };
    let (summary, outcomes) = cmd_train(&studies, &cfg, &a.out, a.resume, &mut |fold, e| {
        eprintln!(
            "fold {fold} epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3} auc {:.3}",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.val_auc
        );
    })?;
    for o in &outcomes {
        println!("fold {}: {} training samples", o.fold, o.n_train_samples);
    }
    println!(
        "mean final validation AUC {:.4}, ACC {:.4}",
        summary.mean_val_auc, summary.mean_val_acc
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => {
            let studies = cmd_synth(a.n_patients, a.prevalence, a.size, &a.out, a.seed)?;
            let pos = studies.iter().filter(|s| s.label.is_positive()).count();
            println!(
                "wrote {} studies ({pos} LDH) to {}",
                studies.len(),
                a.out.join("manifest.json").display()
            );
        }
        Command::AugmentPreview(a) => {
            let n = cmd_augment_preview(&a.manifest, &a.out, a.count, a.seed)?;
            println!("wrote {n} images to {}", a.out.display());
        }
        Command::Train(a) => train(a)?,
        Command::Eval(a) => {
            let studies = load_manifest(&a.manifest)?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let r = cmd_eval(&studies, &ck, &a.out, a.threshold)?;
            let m = &r.image_level;
            println!(
                "ACC {:.4}  AUC {:.4}  F1 {:.4}  Precision {:.4}  Recall {:.4}  AUPRC {:.4}",
                m.confusion.accuracy, m.auc, m.confusion.f1, m.confusion.precision, m.confusion.recall, m.auprc
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
