use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Learned scale/shift plus running statistics of a batch-norm layer.
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    /// `[C]`
    pub gamma: Tensor,
    /// `[C]`
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Per-channel statistics of one training batch; feed to
/// [`BatchNormParams::update_running`] after the step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance.
    pub var: Vec<f64>,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        update_running(&mut self.running_mean, &mut self.running_var, stats, self.momentum);
    }
}

pub fn update_running(mean: &mut [f64], var: &mut [f64], stats: &BatchStats, momentum: f64) {
    for (r, &m) in mean.iter_mut().zip(&stats.mean) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    for (r, &v) in var.iter_mut().zip(&stats.var) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
}

/// Per-channel standardization of `[B,C,H,W]` followed by `γ·x̂ + β`.
///
/// Training mode normalizes with the batch's own (biased) statistics and
/// returns them; eval mode uses the running statistics.
pub fn batch_norm(x: &Tensor, p: &BatchNormParams, mode: Mode) -> Result<(Tensor, Option<BatchStats>)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape("batch_norm", format!("expected [B,C,H,W], got {:?}", x.shape())));
    };
    if c != p.channels() || p.beta.numel() != c || p.running_mean.len() != c || p.running_var.len() != c {
        return Err(Error::shape("batch_norm", format!("input has {c} channels, layer has {}", p.channels())));
    }
    if mode == Mode::Train && b < 2 {
        return Err(Error::shape("batch_norm", format!("training mode needs a batch of at least 2, got {b}")));
    }
    let hw = h * w;
    let n = (b * hw) as f64;
    let v = x.values();
    let plane = move |bi: usize, ci: usize| (bi * c + ci) * hw..(bi * c + ci + 1) * hw;

    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let s: f64 = (0..b).map(|bi| v[plane(bi, ci)].iter().sum::<f64>()).sum();
                let m = s / n;
                let ss: f64 = (0..b)
                    .map(|bi| v[plane(bi, ci)].iter().map(|&x| (x - m) * (x - m)).sum::<f64>())
                    .sum();
                mean[ci] = m;
                var[ci] = ss / n;
            }
            let unbiased = var.iter().map(|&s| s * n / (n - 1.0)).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (p.running_mean.clone(), p.running_var.clone(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + p.eps).sqrt()).collect();
    let gamma = p.gamma.values();
    let beta = p.beta.values();

    let mut xhat = vec![0.0; v.len()];
    let mut out = vec![0.0; v.len()];
    for bi in 0..b {
        for ci in 0..c {
            let r = plane(bi, ci);
            for i in r {
                let xh = (v[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    let xhat = Arc::new(xhat);
    let train = mode == Mode::Train;
    let y = Tensor::from_op(
        "batch_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), p.gamma.clone(), p.beta.clone()],
        move |args| {
            let g = args.grad;
            let gamma = args.parents[1].values();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    for i in plane(bi, ci) {
                        dgamma[ci] += g[i] * xhat[i];
                        dbeta[ci] += g[i];
                    }
                }
            }
            let dx = args.parents[0].requires_grad().then(|| {
                let mut dx = vec![0.0; g.len()];
                for ci in 0..c {
                    let k = gamma[ci] * inv_std[ci];
                    if train {
                        // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                        let mean_dy = dbeta[ci] / n;
                        let mean_dy_xhat = dgamma[ci] / n;
                        for bi in 0..b {
                            for i in plane(bi, ci) {
                                dx[i] = k * (g[i] - mean_dy - xhat[i] * mean_dy_xhat);
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for i in plane(bi, ci) {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        },
    )?;
    Ok((y, stats))
}
