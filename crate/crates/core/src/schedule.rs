//! Fixed variance schedule for the K-step noising chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three numbers a schedule is rebuilt from. This is what configs and
/// checkpoints store; the tables themselves are never serialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleKeys {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleKeys {
    fn default() -> Self {
        Self { steps: 100, beta_min: 1e-4, beta_max: 0.05 }
    }
}

/// Precomputed per-step tables, indexed by diffusion step `k` in `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    keys: ScheduleKeys,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - alpha_bar`, accumulated directly so that step 1 gives `beta_1`
    /// exactly.
    one_minus_alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Coefficients of the Gaussian posterior `q(y_{k-1} | y_k, y_0)`:
/// mean = `coef_y0 * y_0 + coef_yk * y_k`, variance = `var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub coef_y0: f64,
    pub coef_yk: f64,
    pub var: f64,
}

impl NoiseSchedule {
    /// Linear ramp from `beta_min` at k = 1 to `beta_max` at k = K.
    pub fn build(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min < 1.0) || !(beta_max > 0.0 && beta_max < 1.0) {
            return Err(Error::Schedule(format!(
                "bounds must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::Schedule(format!("beta_min {beta_min} exceeds beta_max {beta_max}")));
        }

        let beta: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            let span = beta_max - beta_min;
            let denom = (steps - 1) as f64;
            (0..steps).map(|i| beta_min + (i as f64) / denom * span).collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut one_minus_alpha_bar = Vec::with_capacity(steps);
        let (mut ab, mut om) = (1.0, 0.0);
        for (a, b) in alpha.iter().zip(&beta) {
            // 1 - ab_{k-1} * (1 - b) = (1 - ab_{k-1}) + ab_{k-1} * b
            om += ab * b;
            ab *= a;
            alpha_bar.push(ab);
            one_minus_alpha_bar.push(om);
        }
        let beta_tilde = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 0.0 } else { one_minus_alpha_bar[i - 1] };
                prev / one_minus_alpha_bar[i] * beta[i]
            })
            .collect();

        Ok(Self {
            keys: ScheduleKeys { steps, beta_min, beta_max },
            beta,
            alpha,
            alpha_bar,
            one_minus_alpha_bar,
            beta_tilde,
        })
    }

    pub fn from_keys(keys: &ScheduleKeys) -> Result<Self> {
        Self::build(keys.steps, keys.beta_min, keys.beta_max)
    }

    pub fn keys(&self) -> ScheduleKeys {
        self.keys
    }

    /// Number of diffusion steps K.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            Err(Error::StepOutOfRange { step: k, max: self.steps() })
        } else {
            Ok(())
        }
    }

    // Accessors below panic on out-of-range k; use `check_step` first when
    // the index comes from outside.

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    /// `1 - alpha_bar(k)`; zero at k = 0.
    pub fn one_minus_alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.one_minus_alpha_bar[k - 1]
        }
    }

    pub fn beta_tilde(&self, k: usize) -> f64 {
        self.beta_tilde[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_coefficients(&self, k: usize) -> Result<PosteriorCoefficients> {
        self.check_step(k)?;
        Ok(posterior_from(
            self.alpha_bar(k - 1),
            self.one_minus_alpha_bar(k - 1),
            self.beta(k),
            self.one_minus_alpha_bar(k),
        ))
    }
}

/// Posterior coefficients from the previous cumulative product, the current
/// beta and `1 - alpha_bar` before and after the step.
fn posterior_from(ab_prev: f64, om_prev: f64, beta: f64, om: f64) -> PosteriorCoefficients {
    PosteriorCoefficients {
        coef_y0: ab_prev.sqrt() * beta / om,
        coef_yk: (1.0 - beta).sqrt() * om_prev / om,
        var: om_prev / om * beta,
    }
}
