//! AdamW with decoupled weight decay, and plain gradient descent.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Denominator used to de-bias the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BiasCorrection {
    /// `1 − βᵗ`.
    #[default]
    Standard,
    /// `1 − β` at every step, without the exponent.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: BiasCorrection,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            bias_correction: BiasCorrection::Standard,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    fn correction(&self, beta: f64, t: u64) -> f64 {
        match self.bias_correction {
            BiasCorrection::Standard => 1.0 - beta.powi(t.min(i32::MAX as u64) as i32),
            BiasCorrection::PaperLiteral => 1.0 - beta,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// The two displacement terms of one scalar update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    /// `−η·m̂/(√v̂ + ε)`
    pub adam: f64,
    /// `−η·λ·θ`
    pub decay: f64,
}

/// Updates one scalar's moments in place and returns the displacement
/// terms; `t` is the 1-based step number.
pub fn adamw_terms(cfg: &AdamWConfig, theta: f64, g: f64, m: &mut f64, v: &mut f64, t: u64) -> StepTerms {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / cfg.correction(cfg.beta1, t);
    let v_hat = *v / cfg.correction(cfg.beta2, t);
    let denom = v_hat.sqrt() + cfg.eps;
    let ratio = if m_hat == 0.0 { 0.0 } else { m_hat / denom };
    StepTerms {
        adam: -cfg.lr * ratio,
        decay: -(cfg.lr * cfg.weight_decay * theta),
    }
}

/// In-place AdamW update of a flat parameter slice.
pub fn adamw_update(cfg: &AdamWConfig, theta: &mut [f64], g: &[f64], moments: &mut Moments, t: u64) {
    for (i, th) in theta.iter_mut().enumerate() {
        let s = adamw_terms(cfg, *th, g[i], &mut moments.m[i], &mut moments.v[i], t);
        *th = *th + s.adam + s.decay;
    }
}

/// AdamW optimizer state for a named parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed steps.
    pub t: u64,
    pub moments: IndexMap<String, Moments>,
}

fn check_grad(name: &str, param: &Tensor, g: &[f64]) -> Result<()> {
    if g.len() != param.numel() {
        return Err(Error::shape(
            "optimizer",
            format!("{name}: gradient has {} values, parameter {:?}", g.len(), param.shape()),
        ));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "gradient" }.in_layer(name));
    }
    Ok(())
}

/// Collects the gradient of every parameter, failing on the first missing one.
pub fn collect_grads(params: &ParamStore) -> Result<IndexMap<String, Vec<f64>>> {
    params
        .iter()
        .map(|(name, p)| {
            let g = p.grad().ok_or_else(|| Error::MissingGradient(name.clone()))?;
            Ok((name.clone(), g))
        })
        .collect()
}

fn validate_grads(params: &ParamStore, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
    for (name, p) in params {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
        check_grad(name, p, g)?;
    }
    Ok(())
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            moments: IndexMap::new(),
        })
    }

    /// One step using the gradients accumulated on the parameter tensors.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let grads = collect_grads(params)?;
        self.step_with(params, &grads)
    }

    /// One step with explicit gradients. Nothing is modified on error.
    pub fn step_with(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        validate_grads(params, grads)?;
        for (name, p) in params.iter() {
            if let Some(m) = self.moments.get(name) {
                if m.m.len() != p.numel() || m.v.len() != p.numel() {
                    return Err(Error::shape("optimizer", format!("{name}: moment size differs from parameter")));
                }
            }
        }
        self.t += 1;
        for (name, p) in params.iter_mut() {
            let moments = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros(p.numel()));
            let mut theta = p.to_vec();
            adamw_update(&self.config, &mut theta, &grads[name], moments, self.t);
            *p = Tensor::parameter(p.shape().to_vec(), theta)?;
        }
        Ok(())
    }
}

/// `θ ← θ − η·g` for every parameter, using the accumulated gradients.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    let grads = collect_grads(params)?;
    validate_grads(params, &grads)?;
    for (name, p) in params.iter_mut() {
        let theta: Vec<f64> = p.values().iter().zip(&grads[name]).map(|(t, g)| t - lr * g).collect();
        *p = Tensor::parameter(p.shape().to_vec(), theta)?;
    }
    Ok(())
}
