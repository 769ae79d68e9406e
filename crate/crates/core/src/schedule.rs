//! Forward-diffusion noise schedule.
//!
//! Tables are indexed by step `t ∈ 0..=T`; step 0 is the uncorrupted state with
//! `ᾱ_0 = 1` and `β_0` unused.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    /// `β_t = β_max · t / T`.
    Linear,
}

/// How the variance used when sampling a prediction is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVarianceMode {
    /// `(1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    #[default]
    Ratio,
    /// `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`, the usual DDPM posterior variance.
    Standard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta_max: f64,
    shape: ScheduleShape,
    mode: PosteriorVarianceMode,
    floor: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_max: f64, shape: ScheduleShape) -> Result<Self> {
        Self::with_options(steps, beta_max, shape, PosteriorVarianceMode::Ratio, 0.0)
    }

    pub fn with_options(
        steps: usize,
        beta_max: f64,
        shape: ScheduleShape,
        mode: PosteriorVarianceMode,
        floor: f64,
    ) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidArgument(format!("diffusion steps must be >= 1, got {steps}")));
        }
        if !(beta_max > 0.0 && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!("beta_max must lie in (0, 1), got {beta_max}")));
        }
        if !(0.0..=1.0).contains(&floor) {
            return Err(Error::InvalidArgument(format!("posterior floor must lie in [0, 1], got {floor}")));
        }
        let mut betas = vec![0.0; steps + 1];
        let mut alphas = vec![1.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            betas[t] = match shape {
                ScheduleShape::Linear => beta_max * t as f64 / steps as f64,
            };
            alphas[t] = 1.0 - betas[t];
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        let mut posterior = vec![0.0; steps + 1];
        for t in 1..=steps {
            let ratio = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
            posterior[t] = match mode {
                PosteriorVarianceMode::Ratio => ratio,
                PosteriorVarianceMode::Standard => betas[t] * ratio,
            };
        }
        Ok(Self { steps, beta_max, shape, mode, floor, betas, alphas, alpha_bars, posterior })
    }

    /// Maximum diffusion step `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn shape(&self) -> ScheduleShape {
        self.shape
    }

    pub fn mode(&self) -> PosteriorVarianceMode {
        self.mode
    }

    /// `β_1..β_T`.
    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    /// `α_1..α_T`.
    pub fn alphas(&self) -> &[f64] {
        &self.alphas[1..]
    }

    /// `ᾱ_1..ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::StepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    /// `ᾱ_t` for `t ∈ 0..=T` (`ᾱ_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::StepOutOfRange { t, max: self.steps });
        }
        self.check(t)?;
        Ok(self.betas[t])
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn marginal_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Closed-form draw from `q(x_t | x_0)` given standard-normal `eps`.
    pub fn marginal_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(Error::DimensionMismatch(x0.len(), eps.len()));
        }
        if t == 0 {
            return Ok(x0.to_vec());
        }
        let (signal, noise) = self.marginal_coefficients(t)?;
        Ok(x0.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect())
    }

    /// Posterior variance `β̂_t` for `t ∈ 1..=T`, before the floor is applied.
    /// With `ᾱ_0 = 1` the ratio-mode value at `t = 1` is exactly zero.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::StepOutOfRange { t, max: self.steps });
        }
        self.check(t)?;
        Ok(self.posterior[t])
    }

    /// Variance used when sampling a prediction at step `t`: `β̂_t` raised to
    /// the configured floor, and just the floor at `t = 0`.
    pub fn sampling_variance(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t == 0 { self.floor } else { self.posterior[t].max(self.floor) })
    }
}
