//! Noise schedule, forward noising and the noise-prediction loss.
//!
//! Index 0 is the clean sample: `alpha_bar[0] = 1` and
//! `alpha_bar[k] = prod_{s=1..=k} (1 - beta[s])` for `k >= 1`. `beta[0]` is
//! kept in the table for completeness but never enters a product.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("betas must satisfy 0 < beta_start <= beta_end < 1 (got {start}, {end})")]
    BetaBounds { start: f64, end: f64 },
    #[error("step {k} outside 0..{steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
}

/// Parameters that fully determine a [`NoiseSchedule`]; this is what gets
/// stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` entries.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        Self::from_config(ScheduleConfig { steps, beta_start, beta_end })
    }

    pub fn from_config(config: ScheduleConfig) -> Result<Self, DiffusionError> {
        let ScheduleConfig { steps, beta_start, beta_end } = config;
        if steps < 2 {
            return Err(DiffusionError::TooFewSteps(steps));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BetaBounds { start: beta_start, end: beta_end });
        }
        let betas: Vec<f64> = (0..steps)
            .map(|s| beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        alpha_bars.push(1.0);
        for s in 1..steps {
            alpha_bars.push(alpha_bars[s - 1] * alphas[s]);
        }
        Ok(Self { config, betas, alphas, alpha_bars })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64, DiffusionError> {
        self.alpha_bars
            .get(k)
            .copied()
            .ok_or(DiffusionError::StepOutOfRange { k, steps: self.steps() })
    }

    /// `(sqrt(alpha_bar_k), sqrt(1 - alpha_bar_k))`.
    pub fn coefficients(&self, k: usize) -> Result<(f64, f64), DiffusionError> {
        let ab = self.alpha_bar(k)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps`, in place
    /// over slices.
    pub fn diffuse_into(&self, x0: &[f64], k: usize, eps: &[f64], out: &mut [f64]) -> Result<(), DiffusionError> {
        if x0.len() != eps.len() || out.len() != x0.len() {
            return Err(DiffusionError::Shape(vec![x0.len()], vec![eps.len()]));
        }
        let (a, b) = self.coefficients(k)?;
        for ((o, x), e) in out.iter_mut().zip(x0).zip(eps) {
            *o = a * x + b * e;
        }
        Ok(())
    }
}

/// Forward noising of a whole tensor at a single step.
pub fn forward_diffuse(x0: &Tensor, k: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::Shape(x0.shape().to_vec(), eps.shape().to_vec()));
    }
    let mut out = Tensor::zeros(x0.shape());
    schedule.diffuse_into(x0.data(), k, eps.data(), out.data_mut())?;
    Ok(out)
}

/// Mean over rows of `||eps - eps_hat||^2`; a rank-1 input is one row.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64, DiffusionError> {
    if eps.shape() != eps_hat.shape() {
        return Err(DiffusionError::Shape(eps.shape().to_vec(), eps_hat.shape().to_vec()));
    }
    let rows = eps.rows().max(1);
    let total: f64 = eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / rows as f64)
}
