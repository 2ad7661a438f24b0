//! Trigonometric sparse spectrum features.
//!
//! A set of `m` frequency vectors `r_1..r_m` in `R^d` defines the feature map
//!
//! ```text
//! phi(x) = [cos(2 pi r_1.x), sin(2 pi r_1.x), ..., cos(2 pi r_m.x), sin(2 pi r_m.x)]
//! ```
//!
//! and the low-rank kernel `k(x, x') = phi(x)' Lambda phi(x')` with
//! `Lambda = (signal_variance / m) I`. Cos/sin entries are interleaved so the
//! Jacobian block belonging to one frequency is contiguous.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

pub(crate) const TWO_PI: f64 = 2.0 * PI;

/// Sizes and variances shared by every part of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    /// Input dimension `d`.
    pub dim: usize,
    /// Number of spectral frequency vectors `m`.
    pub n_freq: usize,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl SpectralConfig {
    pub fn new(dim: usize, n_freq: usize, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let cfg = SpectralConfig {
            dim,
            n_freq,
            signal_variance,
            noise_variance,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_freq == 0 {
            return Err(Error::contract("spectral config needs d >= 1 and m >= 1"));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::contract("signal variance must be positive"));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::contract("noise variance must be positive"));
        }
        Ok(())
    }

    /// Length of the feature vector, `2m`.
    pub fn feature_dim(&self) -> usize {
        2 * self.n_freq
    }

    /// Length of the frequency block, `m d`.
    pub fn theta_dim(&self) -> usize {
        self.n_freq * self.dim
    }

    /// Length of the full latent vector `vec(theta, s)`, `m d + 2m`.
    pub fn alpha_dim(&self) -> usize {
        self.theta_dim() + self.feature_dim()
    }

    /// Diagonal entry of `Lambda`.
    pub fn lambda(&self) -> f64 {
        self.signal_variance / self.n_freq as f64
    }
}

/// `m` stacked frequency vectors, frequency `i` occupying entries `i d .. (i+1) d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBlock(DVector<f64>);

impl FrequencyBlock {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("frequency block has non-finite entries"));
        }
        Ok(FrequencyBlock(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Frequency vector `r_i` (0-based).
    pub fn frequency(&self, i: usize, dim: usize) -> &[f64] {
        &self.0.as_slice()[i * dim..(i + 1) * dim]
    }

    fn check(&self, cfg: &SpectralConfig) -> Result<()> {
        ensure_dim("frequency block", cfg.theta_dim(), self.len())
    }
}

/// Angles `2 pi r_i . x` for every frequency, without bounds checks.
#[inline]
pub(crate) fn angles_into(x: &[f64], theta: &[f64], dim: usize, out: &mut [f64]) {
    for (i, a) in out.iter_mut().enumerate() {
        let r = &theta[i * dim..(i + 1) * dim];
        let dot: f64 = r.iter().zip(x).map(|(ri, xi)| ri * xi).sum();
        *a = TWO_PI * dot;
    }
}

#[inline]
pub(crate) fn basis_into(x: &[f64], theta: &[f64], dim: usize, out: &mut [f64]) {
    let m = out.len() / 2;
    for i in 0..m {
        let r = &theta[i * dim..(i + 1) * dim];
        let dot: f64 = r.iter().zip(x).map(|(ri, xi)| ri * xi).sum();
        let (s, c) = (TWO_PI * dot).sin_cos();
        out[2 * i] = c;
        out[2 * i + 1] = s;
    }
}

/// Feature vector `phi_theta(x)` of length `2m`.
pub fn basis_vector(x: &[f64], theta: &FrequencyBlock, cfg: &SpectralConfig) -> Result<DVector<f64>> {
    ensure_dim("input", cfg.dim, x.len())?;
    theta.check(cfg)?;
    let mut out = DVector::zeros(cfg.feature_dim());
    basis_into(x, theta.as_slice(), cfg.dim, out.as_mut_slice());
    Ok(out)
}

pub(crate) fn feature_matrix_unchecked(xs: &DMatrix<f64>, theta: &[f64], cfg: &SpectralConfig) -> DMatrix<f64> {
    let n = xs.nrows();
    let mut phi = DMatrix::zeros(cfg.feature_dim(), n);
    let mut row = vec![0.0; cfg.dim];
    for j in 0..n {
        for (l, v) in row.iter_mut().enumerate() {
            *v = xs[(j, l)];
        }
        basis_into(&row, theta, cfg.dim, phi.column_mut(j).as_mut_slice());
    }
    phi
}

/// Feature matrix `Phi_theta(X)` of shape `2m x n`; column `j` is the feature
/// vector of row `j` of `xs`.
pub fn feature_matrix(xs: &DMatrix<f64>, theta: &FrequencyBlock, cfg: &SpectralConfig) -> Result<DMatrix<f64>> {
    if xs.nrows() > 0 {
        ensure_dim("input columns", cfg.dim, xs.ncols())?;
    }
    theta.check(cfg)?;
    Ok(feature_matrix_unchecked(xs, theta.as_slice(), cfg))
}

/// Low-rank approximation `phi(x)' Lambda phi(x')` of the squared exponential kernel.
pub fn approx_kernel(x: &[f64], x2: &[f64], theta: &FrequencyBlock, cfg: &SpectralConfig) -> Result<f64> {
    let a = basis_vector(x, theta, cfg)?;
    let b = basis_vector(x2, theta, cfg)?;
    let sum: f64 = a.iter().zip(b.iter()).map(|(u, v)| u * v).sum();
    Ok(cfg.lambda() * sum)
}

/// Jacobian `d phi_theta(x) / d theta`, shape `2m x (m d)`.
///
/// Only the `2 x d` diagonal blocks are non-zero:
/// `d cos(2 pi r_i.x) / d r_il = -2 pi x_l sin(.)` and
/// `d sin(2 pi r_i.x) / d r_il = 2 pi x_l cos(.)`.
pub fn basis_jacobian(x: &[f64], theta: &FrequencyBlock, cfg: &SpectralConfig) -> Result<DMatrix<f64>> {
    ensure_dim("input", cfg.dim, x.len())?;
    theta.check(cfg)?;
    let d = cfg.dim;
    let m = cfg.n_freq;
    let mut angles = vec![0.0; m];
    angles_into(x, theta.as_slice(), d, &mut angles);
    let mut jac = DMatrix::zeros(2 * m, m * d);
    for (i, a) in angles.iter().enumerate() {
        let (s, c) = a.sin_cos();
        for l in 0..d {
            jac[(2 * i, i * d + l)] = -TWO_PI * x[l] * s;
            jac[(2 * i + 1, i * d + l)] = TWO_PI * x[l] * c;
        }
    }
    Ok(jac)
}
