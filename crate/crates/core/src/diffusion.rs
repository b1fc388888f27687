//! Model-free diffusion kernels.
//!
//! Everything here is elementwise Gaussian algebra over flat coordinate
//! arrays, so the slice-level functions work for a single path or for a
//! stacked batch of paths alike. [`FuturePath`] and [`NoiseTensor`] wrap the
//! slice kernels with shape checking.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A future trajectory of `T_pred` planar points.
#[derive(Debug, Clone, PartialEq)]
pub struct FuturePath {
    pub points: Vec<[f64; 2]>,
}

/// Standard-normal noise with the same layout as a [`FuturePath`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    pub values: Vec<[f64; 2]>,
}

impl FuturePath {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn zeros(len: usize) -> Self {
        Self { points: vec![[0.0; 2]; len] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        self.points.as_flattened()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self { points: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect() }
    }
}

impl NoiseTensor {
    pub fn new(values: Vec<[f64; 2]>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![[0.0; 2]; len] }
    }

    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Self {
        let flat = crate::rng::standard_normal_vec(rng, 2 * len);
        Self::from_flat(&flat)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        self.values.as_flattened()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self { values: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.as_flat().iter().all(|&v| v == 0.0)
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} entries")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// slice kernels

/// `sqrt(abar_k) * y0 + sqrt(1 - abar_k) * eps`
pub fn forward_sample_flat(s: &NoiseSchedule, y0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    s.check_step(k)?;
    same_len(y0.len(), eps.len(), "forward_sample")?;
    let ab = s.alpha_bar(k);
    let (a, b) = (ab.sqrt(), s.one_minus_alpha_bar(k).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect())
}

/// `(y_k - sqrt(1 - abar_k) * eps) / sqrt(abar_k)`
pub fn reconstruct_y0_flat(s: &NoiseSchedule, yk: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    s.check_step(k)?;
    same_len(yk.len(), eps.len(), "reconstruct_y0")?;
    let ab = s.alpha_bar(k);
    let (a, b) = (ab.sqrt(), s.one_minus_alpha_bar(k).sqrt());
    Ok(yk.iter().zip(eps).map(|(y, e)| (y - b * e) / a).collect())
}

pub fn posterior_mean_flat(s: &NoiseSchedule, y0: &[f64], yk: &[f64], k: usize) -> Result<Vec<f64>> {
    let c = s.posterior_coefficients(k)?;
    same_len(y0.len(), yk.len(), "posterior_mean")?;
    Ok(y0.iter().zip(yk).map(|(a, b)| c.coef_y0 * a + c.coef_yk * b).collect())
}

/// Reverse mean under the noise parameterization:
/// `(y_k - beta_k / sqrt(1 - abar_k) * eps_hat) / sqrt(alpha_k)`.
pub fn reparam_mean_flat(s: &NoiseSchedule, yk: &[f64], k: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
    s.check_step(k)?;
    same_len(yk.len(), eps_hat.len(), "reparam_mean")?;
    let inv_sqrt_alpha = 1.0 / s.alpha(k).sqrt();
    let eps_coef = s.beta(k) / s.one_minus_alpha_bar(k).sqrt();
    Ok(yk.iter().zip(eps_hat).map(|(y, e)| inv_sqrt_alpha * (y - eps_coef * e)).collect())
}

/// One ancestral step `y_{k-1} = reparam_mean + sqrt(beta_k) * z`.
/// At k = 1 the injected noise must be zero.
pub fn reverse_step_flat(
    s: &NoiseSchedule,
    yk: &[f64],
    k: usize,
    eps_hat: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    let mut mean = reparam_mean_flat(s, yk, k, eps_hat)?;
    same_len(yk.len(), z.len(), "reverse_step noise")?;
    if k == 1 {
        if z.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument("reverse step at k = 1 requires z = 0".into()));
        }
        return Ok(mean);
    }
    let sigma = s.beta(k).sqrt();
    for (m, zv) in mean.iter_mut().zip(z) {
        *m += sigma * zv;
    }
    Ok(mean)
}

/// Mean squared error over all entries.
pub fn simple_loss_flat(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    same_len(eps.len(), eps_hat.len(), "simple_loss")?;
    if eps.is_empty() {
        return Err(Error::Shape("simple_loss on empty tensors".into()));
    }
    let sum: f64 = eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

// ---------------------------------------------------------------------------
// typed wrappers

pub fn forward_sample(s: &NoiseSchedule, y0: &FuturePath, k: usize, eps: &NoiseTensor) -> Result<FuturePath> {
    forward_sample_flat(s, y0.as_flat(), k, eps.as_flat()).map(|v| FuturePath::from_flat(&v))
}

pub fn reconstruct_y0(s: &NoiseSchedule, yk: &FuturePath, k: usize, eps: &NoiseTensor) -> Result<FuturePath> {
    reconstruct_y0_flat(s, yk.as_flat(), k, eps.as_flat()).map(|v| FuturePath::from_flat(&v))
}

pub fn posterior_mean(s: &NoiseSchedule, y0: &FuturePath, yk: &FuturePath, k: usize) -> Result<FuturePath> {
    posterior_mean_flat(s, y0.as_flat(), yk.as_flat(), k).map(|v| FuturePath::from_flat(&v))
}

pub fn reparam_mean(s: &NoiseSchedule, yk: &FuturePath, k: usize, eps_hat: &NoiseTensor) -> Result<FuturePath> {
    reparam_mean_flat(s, yk.as_flat(), k, eps_hat.as_flat()).map(|v| FuturePath::from_flat(&v))
}

pub fn reverse_step(
    s: &NoiseSchedule,
    yk: &FuturePath,
    k: usize,
    eps_hat: &NoiseTensor,
    z: &NoiseTensor,
) -> Result<FuturePath> {
    reverse_step_flat(s, yk.as_flat(), k, eps_hat.as_flat(), z.as_flat()).map(|v| FuturePath::from_flat(&v))
}

pub fn simple_loss(eps: &NoiseTensor, eps_hat: &NoiseTensor) -> Result<f64> {
    simple_loss_flat(eps.as_flat(), eps_hat.as_flat())
}
