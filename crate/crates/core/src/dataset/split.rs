use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PatientStudy;
use crate::error::{Error, Result};

/// Group markers assigned to one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    /// Indices of `studies` in the train and validation part of `fold`.
    pub fn partition(&self, studies: &[PatientStudy], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let f = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::Config(format!("fold {fold} out of range 0..{}", self.folds.len())))?;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in studies.iter().enumerate() {
            if f.validation.contains(&s.group_marker) {
                val.push(i);
            } else if f.train.contains(&s.group_marker) {
                train.push(i);
            }
        }
        Ok((train, val))
    }
}

/// Patient-grouped, label-stratified split.
///
/// With `folds > 1` every group marker lands in exactly one validation fold
/// and `val_fraction` must equal `1 / folds`. With `folds == 1` a single
/// holdout of `round(n · val_fraction)` markers is drawn.
pub fn split_folds(studies: &[PatientStudy], folds: usize, val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if folds == 0 {
        return Err(Error::Config("fold count must be at least 1".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    if folds > 1 && (val_fraction - 1.0 / folds as f64).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{folds}-fold cross-validation holds out 1/{folds} per fold, not {val_fraction}"
        )));
    }
    // patient label = label of the first record with that marker
    let mut markers: IndexMap<&str, bool> = IndexMap::new();
    for s in studies {
        markers.entry(&s.group_marker).or_insert(s.label.is_positive());
    }
    let mut pos: Vec<String> = markers.iter().filter(|m| *m.1).map(|m| m.0.to_string()).collect();
    let mut neg: Vec<String> = markers.iter().filter(|m| !*m.1).map(|m| m.0.to_string()).collect();
    let need = folds.max(2);
    if pos.len() < need || neg.len() < need {
        return Err(Error::Invalid(format!(
            "stratified split needs at least {need} patients per class, got {} LDH and {} healthy",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let plan = if folds == 1 {
        let n = markers.len();
        let total = ((n as f64 * val_fraction).round() as usize).clamp(2, n - 2);
        let n_pos = ((total as f64 * pos.len() as f64 / n as f64).round() as usize).clamp(1, total - 1);
        let validation: Vec<String> = pos[..n_pos].iter().chain(&neg[..total - n_pos]).cloned().collect();
        let train = pos[n_pos..].iter().chain(&neg[total - n_pos..]).cloned().collect();
        vec![Fold { train, validation }]
    } else {
        let ordered: Vec<&String> = pos.iter().chain(&neg).collect();
        (0..folds)
            .map(|k| {
                let (validation, train): (Vec<(usize, &&String)>, Vec<_>) =
                    ordered.iter().enumerate().partition(|(j, _)| j % folds == k);
                Fold {
                    train: train.into_iter().map(|(_, m)| (*m).clone()).collect(),
                    validation: validation.into_iter().map(|(_, m)| (*m).clone()).collect(),
                }
            })
            .collect()
    };
    Ok(SplitPlan { folds: plan })
}
