//! Binary classification metrics: confusion-based scores, pairwise AUC,
//! step-wise average precision and ROC/PR curves.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default decision threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Positive-class scores with 0/1 labels and optional patient markers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPredictions {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Empty, or one marker per sample.
    pub markers: Vec<String>,
}

impl ScoredPredictions {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Invalid(format!("label {l} is not 0 or 1")));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("score {s} is not finite")));
        }
        Ok(Self {
            scores,
            labels,
            markers: Vec::new(),
        })
    }

    pub fn with_markers(mut self, markers: Vec<String>) -> Result<Self> {
        if markers.len() != self.scores.len() {
            return Err(Error::Invalid(format!("{} markers for {} samples", markers.len(), self.scores.len())));
        }
        self.markers = markers;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return Err(Error::Invalid(format!("need both classes, got {p} positive and {n} negative")));
        }
        Ok((p, n))
    }

    /// One entry per marker with the mean score of its samples.
    pub fn per_patient(&self) -> Result<ScoredPredictions> {
        if self.markers.is_empty() {
            return Err(Error::Invalid("predictions carry no patient markers".into()));
        }
        let mut groups: IndexMap<&str, (f64, usize, u8)> = IndexMap::new();
        for ((m, &s), &l) in self.markers.iter().zip(&self.scores).zip(&self.labels) {
            let g = groups.entry(m).or_insert((0.0, 0, l));
            if g.2 != l {
                return Err(Error::Invalid(format!("patient {m} has samples with both labels")));
            }
            g.0 += s;
            g.1 += 1;
        }
        let markers = groups.keys().map(|k| k.to_string()).collect();
        let (scores, labels) = groups.values().map(|&(s, n, l)| (s / n as f64, l)).unzip();
        ScoredPredictions::new(scores, labels)?.with_markers(markers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub threshold: f64,
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    #[serde(rename = "ACC")]
    pub accuracy: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "FPR")]
    pub fpr: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts at `threshold` (score ≥ threshold is a positive call).
pub fn confusion_metrics(preds: &ScoredPredictions, threshold: f64) -> Result<ConfusionMetrics> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in preds.scores.iter().zip(&preds.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ConfusionMetrics {
        threshold,
        tp,
        tn,
        fp,
        fn_,
        accuracy: ratio(tp + tn, preds.len()),
        precision,
        recall,
        fpr: ratio(fp, fp + tn),
        f1,
    })
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn compute_auc(preds: &ScoredPredictions) -> Result<f64> {
    let (p, n) = preds.require_both_classes()?;
    let pos: Vec<f64> = preds.scores.iter().zip(&preds.labels).filter(|x| *x.1 == 1).map(|x| *x.0).collect();
    let neg: Vec<f64> = preds.scores.iter().zip(&preds.labels).filter(|x| *x.1 == 0).map(|x| *x.0).collect();
    // counted in half-units to stay exact
    let mut halves: u64 = 0;
    for &sp in &pos {
        for &sn in &neg {
            if sp > sn {
                halves += 2;
            } else if sp == sn {
                halves += 1;
            }
        }
    }
    Ok(halves as f64 / (2 * p * n) as f64)
}

/// Distinct scores in descending order with cumulative (TP, FP) at each.
fn sweep(preds: &ScoredPredictions) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds.scores[b].total_cmp(&preds.scores[a]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if preds.labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_run = order.get(k + 1).is_none_or(|&j| preds.scores[j] != preds.scores[i]);
        if last_of_run {
            out.push((preds.scores[i], tp, fp));
        }
    }
    out
}

/// Average precision: Σ (R_k − R_{k−1}) · P_k over descending thresholds.
pub fn compute_auprc(preds: &ScoredPredictions) -> Result<f64> {
    let (p, _) = preds.counts();
    if p == 0 {
        return Err(Error::Invalid("no positive samples".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in sweep(preds) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `None` for the (0, 0) origin above every score.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

/// ROC points from (0, 0) through one point per distinct score, ending at
/// (1, 1); PR points at the same thresholds.
pub fn curve_points(preds: &ScoredPredictions) -> Result<Curves> {
    let (p, n) = preds.require_both_classes()?;
    let mut roc = vec![RocPoint {
        threshold: None,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut pr = Vec::new();
    for (t, tp, fp) in sweep(preds) {
        roc.push(RocPoint {
            threshold: Some(t),
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
        pr.push(PrPoint {
            threshold: t,
            recall: tp as f64 / p as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(Curves { roc, pr })
}

/// Trapezoidal area under ROC points ordered by increasing FPR.
pub fn trapezoid_area(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Headline metrics plus curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    #[serde(flatten)]
    pub confusion: ConfusionMetrics,
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(rename = "AUPRC")]
    pub auprc: f64,
    pub curves: Curves,
}

pub fn evaluate(preds: &ScoredPredictions, threshold: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        n_samples: preds.len(),
        confusion: confusion_metrics(preds, threshold)?,
        auc: compute_auc(preds)?,
        auprc: compute_auprc(preds)?,
        curves: curve_points(preds)?,
    })
}

pub fn roc_csv(curves: &Curves) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curves.roc {
        let t = p.threshold.map_or("inf".to_string(), |t| format!("{t:?}"));
        let _ = writeln!(s, "{t},{:?},{:?}", p.fpr, p.tpr);
    }
    s
}

pub fn pr_csv(curves: &Curves) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    for p in &curves.pr {
        let _ = writeln!(s, "{:?},{:?},{:?}", p.threshold, p.recall, p.precision);
    }
    s
}

pub fn write_curves(dir: &Path, curves: &Curves) -> Result<()> {
    for (name, body) in [("roc.csv", roc_csv(curves)), ("pr.csv", pr_csv(curves))] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(pos: &[f64], neg: &[f64]) -> ScoredPredictions {
        let scores = pos.iter().chain(neg).copied().collect();
        let labels = pos.iter().map(|_| 1).chain(neg.iter().map(|_| 0)).collect();
        ScoredPredictions::new(scores, labels).unwrap()
    }

    #[test]
    fn confusion_hand_example() {
        // TP=3, FP=1, TN=4, FN=2
        let p = preds(&[0.9, 0.8, 0.7, 0.2, 0.1], &[0.6, 0.4, 0.3, 0.2, 0.0]);
        let m = confusion_metrics(&p, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (3, 1, 4, 2));
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.6).abs() < 1e-15);
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
        assert!((m.fpr - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_confusion() {
        let p = preds(&[0.1, 0.2], &[0.3]);
        let m = confusion_metrics(&p, 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let perfect = confusion_metrics(&preds(&[0.9], &[0.1]), 0.5).unwrap();
        assert_eq!((perfect.accuracy, perfect.f1), (1.0, 1.0));
        assert!(confusion_metrics(&preds(&[], &[]), 0.5).is_err());
        assert!(confusion_metrics(&p, 1.5).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&preds(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        let p = preds(&[0.9, 0.8, 0.4], &[0.7, 0.3]);
        assert!((compute_auc(&p).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((trapezoid_area(&curve_points(&p).unwrap().roc) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(compute_auc(&preds(&[0.5, 0.5], &[0.5])).unwrap(), 0.5);
        assert!(compute_auc(&preds(&[0.5], &[])).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(compute_auprc(&preds(&[0.9, 0.8], &[0.1])).unwrap(), 1.0);
        let p = preds(&[0.9, 0.4], &[0.7]);
        assert!((compute_auprc(&p).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        let c = curve_points(&p).unwrap();
        let pairs: Vec<(f64, f64)> = c.pr.iter().map(|q| (q.precision, q.recall)).collect();
        assert_eq!(pairs, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
        assert!(compute_auprc(&preds(&[], &[0.3])).is_err());
    }

    #[test]
    fn auprc_tracks_prevalence_for_random_scores() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (trials, n, prev) = (400, 200, 0.3);
        let values: Vec<f64> = (0..trials)
            .map(|_| {
                let labels: Vec<u8> = (0..n).map(|i| u8::from(i < (n as f64 * prev) as usize)).collect();
                let scores = (0..n).map(|_| rng.random::<f64>()).collect();
                compute_auprc(&ScoredPredictions::new(scores, labels).unwrap()).unwrap()
            })
            .collect();
        let mean = values.iter().sum::<f64>() / trials as f64;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
        // average precision of a random ranking is slightly above prevalence at finite n
        assert!((mean - prev).abs() < 3.0 * sd / (trials as f64).sqrt() + 0.02, "{mean} ± {sd}");
    }

    #[test]
    fn roc_of_perfect_pair() {
        let c = curve_points(&preds(&[1.0], &[0.0])).unwrap();
        let pts: Vec<(f64, f64)> = c.roc.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let last = c.pr.last().unwrap();
        assert_eq!((last.recall, last.precision), (1.0, 0.5));
    }

    #[test]
    fn per_patient_averages_scores() {
        let p = ScoredPredictions::new(vec![0.2, 0.4, 0.9], vec![0, 0, 1])
            .unwrap()
            .with_markers(vec!["a".into(), "a".into(), "b".into()])
            .unwrap();
        let q = p.per_patient().unwrap();
        assert_eq!(q.labels, vec![0, 1]);
        assert!((q.scores[0] - 0.3).abs() < 1e-15);
        let bad = ScoredPredictions::new(vec![0.2, 0.4], vec![0, 1])
            .unwrap()
            .with_markers(vec!["a".into(), "a".into()])
            .unwrap();
        assert!(bad.per_patient().is_err());
    }

    #[test]
    fn report_json_has_headline_keys() {
        let r = evaluate(&preds(&[0.9, 0.4], &[0.7, 0.1]), 0.5).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in ["ACC", "AUC", "F1", "Precision", "Recall", "AUPRC", "TP", "TN", "FP", "FN", "FPR"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(roc_csv(&r.curves).starts_with("threshold,fpr,tpr\ninf,0.0,0.0\n"));
    }

    fn labeled_scores() -> impl Strategy<Value = ScoredPredictions> {
        (2usize..50)
            .prop_flat_map(|n| (proptest::collection::vec(0f64..1.0, n), proptest::collection::vec(0u8..2, n)))
            .prop_filter_map("both classes", |(s, mut l)| {
                l[0] = 1;
                l[1] = 0;
                ScoredPredictions::new(s, l).ok()
            })
    }

    proptest! {
        #[test]
        fn roc_points_monotone_and_rates_bounded(p in labeled_scores()) {
            let c = curve_points(&p).unwrap();
            for w in c.roc.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            let last = c.roc.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            let m = confusion_metrics(&p, 0.5).unwrap();
            prop_assert_eq!(m.tp + m.tn + m.fp + m.fn_, p.len());
            for r in [m.accuracy, m.precision, m.recall, m.fpr, m.f1] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            let auprc = compute_auprc(&p).unwrap();
            prop_assert!(auprc > 0.0 && auprc <= 1.0 + 1e-15);
        }

        #[test]
        fn auc_invariant_to_monotone_transform_and_symmetric(p in labeled_scores()) {
            let auc = compute_auc(&p).unwrap();
            let warped = ScoredPredictions::new(p.scores.iter().map(|s| s.powi(3) * 0.5 + 0.1).collect(), p.labels.clone()).unwrap();
            prop_assert_eq!(compute_auc(&warped).unwrap(), auc);
            let flipped = ScoredPredictions::new(
                p.scores.iter().map(|s| 1.0 - s).collect(),
                p.labels.iter().map(|l| 1 - l).collect(),
            ).unwrap();
            prop_assert!((compute_auc(&flipped).unwrap() - auc).abs() < 1e-15);
        }
    }
}
