//! Cross-validated training, evaluation and the data commands behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, augment_study, sample_spec, Role};
use crate::checkpoint::{Checkpoint, RngState};
use crate::dataset::{
    generate_phantom_sized, labels_of, load_manifest, split_folds, stack_batch, write_manifest, IntensityProbe,
    PatientStudy, SplitPlan,
};
use crate::error::{Error, Result};
use crate::image::write_pgm;
use crate::layers::Mode;
use crate::metrics::{compute_auc, confusion_metrics, evaluate, write_curves, EvalReport, ScoredPredictions};
use crate::model::{build_model, cross_entropy, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::seed::derive_seed;
use crate::tensor::sigmoid;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    /// Train only this fold; all folds when absent.
    pub fold_index: Option<usize>,
    pub val_fraction: f64,
    pub aug_multiplier: usize,
    pub threshold: f64,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            seed: 0,
            epochs: 30,
            batch_size: 8,
            folds: 5,
            fold_index: None,
            val_fraction: 0.2,
            aug_multiplier: 1,
            threshold: 0.5,
            model: ModelConfig::reduced(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch statistics".into()));
        }
        if self.folds == 0 || self.aug_multiplier == 0 {
            return Err(Error::Config("folds and augmentation multiplier must be at least 1".into()));
        }
        if let Some(k) = self.fold_index {
            if k >= self.folds {
                return Err(Error::Config(format!("fold index {k} out of range 0..{}", self.folds)));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Effective validation fraction: `1/folds` under cross-validation.
    pub fn holdout_fraction(&self) -> f64 {
        if self.folds > 1 {
            1.0 / self.folds as f64
        } else {
            self.val_fraction
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,val_auc";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.val_auc
        )
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub log: Vec<EpochLog>,
    pub model: Model,
    pub best_val_auc: Option<f64>,
    pub n_train_samples: usize,
    pub train_markers: Vec<String>,
    pub validation_markers: Vec<String>,
}

impl FoldOutcome {
    pub fn last(&self) -> Option<&EpochLog> {
        self.log.last()
    }
}

/// Positive-class probability `softmax(z)[1]` for two-class logits.
pub fn positive_scores(logits: &[f64]) -> Vec<f64> {
    logits.chunks(2).map(|z| sigmoid(z[1] - z[0])).collect()
}

/// Eval-mode positive-class scores and mean loss over `studies`.
pub fn score_studies(model: &Model, studies: &[&PatientStudy], batch_size: usize) -> Result<(Vec<f64>, f64)> {
    let mut scores = Vec::with_capacity(studies.len());
    let mut loss = 0.0;
    for chunk in studies.chunks(batch_size.max(1)) {
        let logits = model.predict(&stack_batch(chunk)?)?;
        loss += cross_entropy(&logits, &labels_of(chunk))?.item()? * chunk.len() as f64;
        scores.extend(positive_scores(logits.values()));
    }
    Ok((scores, loss / studies.len().max(1) as f64))
}

/// Shuffled mini-batches; a trailing batch of one joins the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

fn accuracy(scores: &[f64], labels: &[usize], threshold: f64) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| usize::from(**s >= threshold) == **l)
        .count();
    hits as f64 / scores.len().max(1) as f64
}

fn validation_metrics(model: &Model, val: &[&PatientStudy], cfg: &RunConfig) -> Result<(f64, f64, f64)> {
    let (scores, loss) = score_studies(model, val, cfg.batch_size)?;
    let labels = labels_of(val);
    let acc = accuracy(&scores, &labels, cfg.threshold);
    let preds = ScoredPredictions::new(scores, labels.iter().map(|&l| l as u8).collect())?;
    let auc = compute_auc(&preds).unwrap_or(f64::NAN);
    Ok((loss, acc, auc))
}

/// Files written into a fold directory.
pub struct FoldFiles {
    pub dir: PathBuf,
}

impl FoldFiles {
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for l in log {
        let _ = writeln!(s, "{}", l.csv_line());
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parses a log written by this module.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::Invalid(format!("{}: malformed log line `{line}`", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
                val_auc: num(5)?,
            })
        })
        .collect()
}

/// Trains one fold from scratch or from `resume`, calling `on_epoch` after
/// every epoch. With `files`, the log and `last`/`best` checkpoints are
/// rewritten each epoch.
pub fn train_fold(
    studies: &[PatientStudy],
    plan: &SplitPlan,
    fold: usize,
    cfg: &RunConfig,
    files: Option<&FoldFiles>,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<FoldOutcome> {
    cfg.validate()?;
    let (train_idx, val_idx) = plan.partition(studies, fold)?;
    if train_idx.len() < 2 {
        return Err(Error::Invalid(format!("fold {fold} has fewer than 2 training studies")));
    }
    let (h, w) = studies[train_idx[0]].size()?;
    if (h, w) != cfg.model.input_size {
        return Err(Error::Config(format!(
            "images are {h}×{w} but the model expects {}×{}",
            cfg.model.input_size.0, cfg.model.input_size.1
        )));
    }
    let tagged: Vec<(&PatientStudy, Role)> = train_idx.iter().map(|&i| (&studies[i], Role::Train)).collect();
    let train = augment_dataset(&tagged, cfg.aug_multiplier, derive_seed(cfg.seed, &[fold as u64, 1]), 1)?;
    let val: Vec<&PatientStudy> = val_idx.iter().map(|&i| &studies[i]).collect();

    let (mut model, mut opt, mut rng, start, mut best, mut log) = match resume {
        Some(ck) => {
            if ck.model.config() != &cfg.model {
                return Err(Error::Config("checkpoint model configuration differs from the run".into()));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume".into()))?;
            let rng = ck
                .rng
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no rng state to resume".into()))?
                .restore()?;
            let log = match files {
                Some(f) => read_log(&f.log())?.into_iter().take(ck.epoch).collect(),
                None => Vec::new(),
            };
            (ck.model, opt, rng, ck.epoch, ck.best_val_auc, log)
        }
        None => (
            build_model(&cfg.model, derive_seed(cfg.seed, &[fold as u64, 0]))?,
            AdamW::new(cfg.optimizer)?,
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[fold as u64, 2])),
            0,
            None,
            Vec::new(),
        ),
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in start + 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in batches(&order, cfg.batch_size) {
            let items: Vec<&PatientStudy> = batch.iter().map(|&i| &train[i]).collect();
            let labels = labels_of(&items);
            let out = model.forward(&stack_batch(&items)?, Mode::Train)?;
            let loss = cross_entropy(&out.logits, &labels)?;
            loss.backward()?;
            opt.step(model.parameters_mut())?;
            model.commit_batch_stats(&out.batch_stats)?;
            loss_sum += loss.item()? * items.len() as f64;
            let scores = positive_scores(out.logits.values());
            hits += scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| usize::from(**s >= cfg.threshold) == **l)
                .count();
        }
        let (val_loss, val_acc, val_auc) = if val.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            validation_metrics(&model, &val, cfg)?
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_loss,
            val_acc,
            val_auc,
        };
        let improved = val_auc.is_finite() && best.is_none_or(|b| val_auc > b);
        if improved {
            best = Some(val_auc);
        }
        on_epoch(fold, &entry);
        log.push(entry);
        if let Some(f) = files {
            let ck = Checkpoint {
                model: model.clone(),
                optimizer: Some(opt.clone()),
                epoch,
                best_val_auc: best,
                rng: Some(RngState::capture(&rng)),
            };
            if improved {
                ck.save(&f.best())?;
            }
            ck.save(&f.last())?;
            write_log(&f.log(), &log)?;
        }
    }
    let f = &plan.folds[fold];
    Ok(FoldOutcome {
        fold,
        log,
        model,
        best_val_auc: best,
        n_train_samples: train.len(),
        train_markers: f.train.clone(),
        validation_markers: f.validation.clone(),
    })
}

/// Per-fold result written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train_samples: usize,
    pub n_validation: usize,
    pub final_epoch: Option<EpochLog>,
    pub best_val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub folds: Vec<FoldSummary>,
    /// Means of the final-epoch validation metrics across trained folds.
    pub mean_val_auc: f64,
    pub mean_val_acc: f64,
}

/// Trains the selected fold(s) into `out/fold<k>/`, writing `config.json`,
/// `split.json` and `summary.json` at the top.
pub fn cmd_train(
    studies: &[PatientStudy],
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<(TrainSummary, Vec<FoldOutcome>)> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.json");
    if resume {
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let mut saved: RunConfig = serde_json::from_str(&text)?;
        saved.epochs = cfg.epochs;
        if &saved != cfg {
            return Err(Error::Config("resume requires the configuration of the original run".into()));
        }
    }
    fs::write(&config_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&config_path, e))?;
    let plan = split_folds(studies, cfg.folds, cfg.holdout_fraction(), cfg.seed)?;
    let split_path = out.join("split.json");
    fs::write(&split_path, serde_json::to_string_pretty(&plan)? + "\n").map_err(|e| Error::io(&split_path, e))?;

    let folds: Vec<usize> = match cfg.fold_index {
        Some(k) => vec![k],
        None => (0..plan.folds.len()).collect(),
    };
    let mut outcomes = Vec::new();
    for k in folds {
        let files = FoldFiles {
            dir: out.join(format!("fold{k}")),
        };
        fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
        let ck = if resume && files.last().exists() {
            Some(Checkpoint::load(&files.last())?)
        } else {
            None
        };
        outcomes.push(train_fold(studies, &plan, k, cfg, Some(&files), ck, on_epoch)?);
    }
    let folds: Vec<FoldSummary> = outcomes
        .iter()
        .map(|o| FoldSummary {
            fold: o.fold,
            n_train_samples: o.n_train_samples,
            n_validation: o.validation_markers.len(),
            final_epoch: o.last().cloned(),
            best_val_auc: o.best_val_auc,
        })
        .collect();
    let mean = |f: fn(&EpochLog) -> f64| {
        let v: Vec<f64> = folds.iter().filter_map(|s| s.final_epoch.as_ref().map(f)).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let summary = TrainSummary {
        mean_val_auc: mean(|e| e.val_auc),
        mean_val_acc: mean(|e| e.val_acc),
        folds,
    };
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((summary, outcomes))
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub image_level: EvalReport,
    pub per_patient: EvalReport,
}

/// Scores every study with the checkpoint and writes `metrics.json`,
/// `roc.csv` and `pr.csv` (image level) plus `per_patient_roc.csv` and
/// `per_patient_pr.csv`.
pub fn cmd_eval(studies: &[PatientStudy], checkpoint: &Checkpoint, out: &Path, threshold: f64) -> Result<EvalOutput> {
    let model = &checkpoint.model;
    let expected = model.config().input_size;
    for s in studies {
        if s.size()? != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {}×{} images, patient {} has {:?}",
                expected.0,
                expected.1,
                s.patient_id,
                s.size()?
            )));
        }
    }
    let refs: Vec<&PatientStudy> = studies.iter().collect();
    let (scores, _) = score_studies(model, &refs, 16)?;
    let preds = ScoredPredictions::new(scores, refs.iter().map(|s| s.label.index() as u8).collect())?
        .with_markers(refs.iter().map(|s| s.group_marker.clone()).collect())?;
    let image_level = evaluate(&preds, threshold)?;
    let per_patient = evaluate(&preds.per_patient()?, threshold)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("metrics.json");
    let output = EvalOutput {
        image_level,
        per_patient,
    };
    fs::write(&path, serde_json::to_string_pretty(&output)? + "\n").map_err(|e| Error::io(&path, e))?;
    write_curves(out, &output.image_level.curves)?;
    let pp = out.join("per_patient");
    fs::create_dir_all(&pp).map_err(|e| Error::io(&pp, e))?;
    write_curves(&pp, &output.per_patient.curves)?;
    Ok(output)
}

/// Generates a phantom dataset and writes it with its manifest.
pub fn cmd_synth(n_patients: usize, prevalence: f64, size: usize, out: &Path, seed: u64) -> Result<Vec<PatientStudy>> {
    let studies = generate_phantom_sized(n_patients, prevalence, seed, size)?;
    write_manifest(out, &studies, 255)?;
    Ok(studies)
}

/// Writes `count` augmented versions of the first study of a manifest, one
/// PGM per modality, plus the sampled specs as JSON.
pub fn cmd_augment_preview(manifest: &Path, out: &Path, count: usize, seed: u64) -> Result<usize> {
    let studies = load_manifest(manifest)?;
    let study = studies
        .first()
        .ok_or_else(|| Error::Invalid("manifest has no studies".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut specs = Vec::with_capacity(count);
    for k in 0..count {
        let spec = sample_spec(derive_seed(seed, &[k as u64]));
        let aug = augment_study(study, &spec)?;
        for (m, img) in crate::dataset::Modality::ALL.iter().zip(&aug.images) {
            write_pgm(&out.join(format!("{k:03}_{}.pgm", m.tag())), img, 255)?;
        }
        specs.push(spec);
    }
    let path = out.join("specs.json");
    fs::write(&path, serde_json::to_string_pretty(&specs)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(count * 3)
}

/// Mean validation AUC of the intensity probe over the folds of `plan`.
pub fn probe_auc(studies: &[PatientStudy], plan: &SplitPlan) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..plan.folds.len() {
        let (tr, va) = plan.partition(studies, k)?;
        let train: Vec<&PatientStudy> = tr.iter().map(|&i| &studies[i]).collect();
        let probe = IntensityProbe::fit(&train)?;
        let preds = ScoredPredictions::new(
            va.iter().map(|&i| probe.score(&studies[i])).collect(),
            va.iter().map(|&i| studies[i].label.index() as u8).collect(),
        )?;
        total += compute_auc(&preds)?;
    }
    Ok(total / plan.folds.len() as f64)
}

/// Accuracy of `model` on `studies` at `threshold`.
pub fn accuracy_on(model: &Model, studies: &[&PatientStudy], threshold: f64) -> Result<f64> {
    let (scores, _) = score_studies(model, studies, 16)?;
    let preds = ScoredPredictions::new(scores, studies.iter().map(|s| s.label.index() as u8).collect())?;
    Ok(confusion_metrics(&preds, threshold)?.accuracy)
}
