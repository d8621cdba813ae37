//! Logistic regression on global intensity statistics, used to check that
//! a dataset cannot be classified by brightness alone.

use super::PatientStudy;
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// `(mean, std)` over every pixel of the three modalities.
pub fn intensity_features(s: &PatientStudy) -> [f64; 2] {
    let n: usize = s.images.iter().map(|i| i.pixels.len()).sum();
    let all = || s.images.iter().flat_map(|i| i.pixels.iter().copied());
    let mean = all().sum::<f64>() / n as f64;
    let var = all().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n as f64;
    [mean, var.sqrt()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityProbe {
    center: [f64; 2],
    scale: [f64; 2],
    /// bias, w_mean, w_std on standardized features
    weights: [f64; 3],
}

const ITERATIONS: usize = 50;
const RIDGE: f64 = 1e-3;

impl IntensityProbe {
    /// Fits by Newton's method with a small ridge penalty.
    pub fn fit(studies: &[&PatientStudy]) -> Result<Self> {
        if studies.len() < 2 {
            return Err(Error::Invalid("probe needs at least two studies".into()));
        }
        let feats: Vec<[f64; 2]> = studies.iter().map(|s| intensity_features(s)).collect();
        let n = feats.len() as f64;
        let mut center = [0.0; 2];
        let mut scale = [0.0; 2];
        for j in 0..2 {
            center[j] = feats.iter().map(|f| f[j]).sum::<f64>() / n;
            let var = feats.iter().map(|f| (f[j] - center[j]).powi(2)).sum::<f64>() / n;
            scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let rows: Vec<[f64; 3]> = feats
            .iter()
            .map(|f| [1.0, (f[0] - center[0]) / scale[0], (f[1] - center[1]) / scale[1]])
            .collect();
        let y: Vec<f64> = studies.iter().map(|s| s.label.index() as f64).collect();
        let mut w = [0.0; 3];
        for _ in 0..ITERATIONS {
            let mut grad = [0.0; 3];
            let mut hess = [[0.0; 3]; 3];
            for (x, &t) in rows.iter().zip(&y) {
                let p = sigmoid(x.iter().zip(&w).map(|(a, b)| a * b).sum());
                for a in 0..3 {
                    grad[a] += (p - t) * x[a];
                    for b in 0..3 {
                        hess[a][b] += p * (1.0 - p) * x[a] * x[b];
                    }
                }
            }
            for a in 0..3 {
                grad[a] += RIDGE * w[a];
                hess[a][a] += RIDGE;
            }
            let step = solve3(hess, grad).ok_or(Error::NonFinite { op: "probe fit" })?;
            for a in 0..3 {
                w[a] -= step[a];
            }
            if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-12 {
                break;
            }
        }
        Ok(Self {
            center,
            scale,
            weights: w,
        })
    }

    /// Probability of the positive class.
    pub fn score(&self, s: &PatientStudy) -> f64 {
        let f = intensity_features(s);
        let z = self.weights[0]
            + self.weights[1] * (f[0] - self.center[0]) / self.scale[0]
            + self.weights[2] * (f[1] - self.center[1]) / self.scale[1];
        sigmoid(z)
    }
}

/// Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
