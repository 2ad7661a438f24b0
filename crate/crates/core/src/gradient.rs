//! Block log-likelihood, per-block gradient terms and the unbiased stochastic
//! gradient of the evidence lower bound with respect to `eta = (M, b)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::{SpectralConfig, TWO_PI};
use crate::localmodel::AlphaVector;
use crate::partition::PartitionedDataset;
use crate::variational::{log_prior_flat, log_q, prior_precision_times, sample_z, PriorSpec, VariationalState};

/// A gradient (or update direction) with respect to `(M, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaGradient {
    pub grad_m: DMatrix<f64>,
    pub grad_b: DVector<f64>,
}

impl EtaGradient {
    pub fn zeros(dim: usize) -> Self {
        EtaGradient {
            grad_m: DMatrix::zeros(dim, dim),
            grad_b: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.grad_b.len()
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, other: &EtaGradient, w: f64) {
        self.grad_m += &other.grad_m * w;
        self.grad_b.axpy(w, &other.grad_b, 1.0);
    }

    pub fn scale(&mut self, w: f64) {
        self.grad_m *= w;
        self.grad_b *= w;
    }

    pub fn norm(&self) -> f64 {
        (self.grad_m.norm_squared() + self.grad_b.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grad_m.iter().chain(self.grad_b.iter()).all(|v| v.is_finite())
    }

    /// `vec(M)` (column-major) followed by `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.grad_m.iter().chain(self.grad_b.iter()).copied().collect()
    }

    pub fn from_flat(flat: &[f64], dim: usize) -> Result<Self> {
        ensure_dim("flat gradient", dim * dim + dim, flat.len())?;
        Ok(EtaGradient {
            grad_m: DMatrix::from_column_slice(dim, dim, &flat[..dim * dim]),
            grad_b: DVector::from_column_slice(&flat[dim * dim..]),
        })
    }
}

/// Sample counts `a` (block indices) and `b_count` (z draws) per gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientSamplePlan {
    pub n_partition_samples: usize,
    pub n_z_samples: usize,
    pub rng_seed: u64,
}

impl GradientSamplePlan {
    pub fn new(n_partition_samples: usize, n_z_samples: usize, rng_seed: u64) -> Result<Self> {
        let plan = GradientSamplePlan {
            n_partition_samples,
            n_z_samples,
            rng_seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_partition_samples == 0 || self.n_z_samples == 0 {
            return Err(Error::contract("gradient plan needs a >= 1 and b_count >= 1"));
        }
        Ok(())
    }
}

impl Default for GradientSamplePlan {
    fn default() -> Self {
        GradientSamplePlan {
            n_partition_samples: 4,
            n_z_samples: 4,
            rng_seed: 0,
        }
    }
}

/// Pre-drawn block indices and base samples for one gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraws {
    pub indices: Vec<usize>,
    pub zs: Vec<DVector<f64>>,
}

/// Independent ChaCha substreams for block indices and z draws, keyed by a
/// master seed and an iteration counter. Iteration `t` uses streams `2t` and
/// `2t + 1`, so any iteration can be replayed without the ones before it.
#[derive(Debug, Clone)]
pub struct SampleStreams {
    indices: ChaCha8Rng,
    zs: ChaCha8Rng,
}

impl SampleStreams {
    pub fn new(seed: u64, iteration: u64) -> Self {
        let mut indices = ChaCha8Rng::seed_from_u64(seed);
        indices.set_stream(2 * iteration);
        let mut zs = ChaCha8Rng::seed_from_u64(seed);
        zs.set_stream(2 * iteration + 1);
        SampleStreams { indices, zs }
    }

    pub fn index_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.indices
    }

    pub fn z_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.zs
    }

    /// `a` uniform block indices (with replacement) and `b_count` standard normal vectors.
    pub fn draw(&mut self, a: usize, b_count: usize, p: usize, dim: usize) -> SampleDraws {
        let indices = (0..a).map(|_| self.indices.random_range(0..p)).collect();
        let zs = (0..b_count).map(|_| sample_z(&mut self.zs, dim)).collect();
        SampleDraws { indices, zs }
    }
}

fn check_block(ys: &DVector<f64>, xs: &DMatrix<f64>, cfg: &SpectralConfig) -> Result<()> {
    ensure_dim("block targets", xs.nrows(), ys.len())?;
    if xs.nrows() > 0 {
        ensure_dim("input columns", cfg.dim, xs.ncols())?;
    }
    Ok(())
}

fn check_alpha(alpha: &AlphaVector, cfg: &SpectralConfig) -> Result<()> {
    ensure_dim("frequency block", cfg.theta_dim(), alpha.theta.len())?;
    ensure_dim("nuisance vector", cfg.feature_dim(), alpha.s.len())
}

/// Residual sum of squares `v'v` with `v = y - Phi' s`.
pub(crate) fn residual_sq(ys: &DVector<f64>, xs: &DMatrix<f64>, theta: &[f64], s: &DVector<f64>, cfg: &SpectralConfig) -> f64 {
    let d = cfg.dim;
    let mut phi = vec![0.0; cfg.feature_dim()];
    let mut row = vec![0.0; d];
    let mut total = 0.0;
    for j in 0..xs.nrows() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = xs[(j, l)];
        }
        crate::features::basis_into(&row, theta, d, &mut phi);
        let fit: f64 = phi.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
        let r = ys[j] - fit;
        total += r * r;
    }
    total
}

/// `log p(y | alpha) = -0.5 v'v / noise_variance - 0.5 n log(2 pi noise_variance)`.
pub fn log_likelihood(ys: &DVector<f64>, xs: &DMatrix<f64>, alpha: &AlphaVector, cfg: &SpectralConfig) -> Result<f64> {
    check_block(ys, xs, cfg)?;
    check_alpha(alpha, cfg)?;
    let sn2 = cfg.noise_variance;
    let vv = residual_sq(ys, xs, alpha.theta.as_slice(), &alpha.s, cfg);
    Ok(-0.5 * vv / sn2 - 0.5 * ys.len() as f64 * (2.0 * PI * sn2).ln())
}

/// Gradient of `-0.5 v'v / noise_variance` with respect to the flat `alpha`.
pub(crate) fn alpha_gradient_unchecked(
    ys: &DVector<f64>,
    xs: &DMatrix<f64>,
    theta: &[f64],
    s: &DVector<f64>,
    cfg: &SpectralConfig,
) -> DVector<f64> {
    let d = cfg.dim;
    let m = cfg.n_freq;
    let td = cfg.theta_dim();
    let mut g = DVector::zeros(td + 2 * m);
    let mut row = vec![0.0; d];
    let mut cs = vec![(0.0, 0.0); m];
    for j in 0..xs.nrows() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = xs[(j, l)];
        }
        let mut fit = 0.0;
        for i in 0..m {
            let r = &theta[i * d..(i + 1) * d];
            let dot: f64 = r.iter().zip(&row).map(|(a, b)| a * b).sum();
            let (sn, c) = (TWO_PI * dot).sin_cos();
            cs[i] = (c, sn);
            fit += c * s[2 * i] + sn * s[2 * i + 1];
        }
        let v = ys[j] - fit;
        if v == 0.0 {
            continue;
        }
        for (i, &(c, sn)) in cs.iter().enumerate() {
            g[td + 2 * i] += v * c;
            g[td + 2 * i + 1] += v * sn;
            // d(phi's)/d r_il = 2 pi x_l (cos * s_sin - sin * s_cos)
            let w = v * TWO_PI * (c * s[2 * i + 1] - sn * s[2 * i]);
            for l in 0..d {
                g[i * d + l] += w * row[l];
            }
        }
    }
    g /= cfg.noise_variance;
    g
}

/// Data-term gradient of one block with respect to `alpha`.
pub fn partition_alpha_gradient(
    ys: &DVector<f64>,
    xs: &DMatrix<f64>,
    alpha: &AlphaVector,
    cfg: &SpectralConfig,
) -> Result<DVector<f64>> {
    check_block(ys, xs, cfg)?;
    check_alpha(alpha, cfg)?;
    Ok(alpha_gradient_unchecked(ys, xs, alpha.theta.as_slice(), &alpha.s, cfg))
}

/// Block term `F_i`: the gradient of `-0.5 v_i'v_i / noise_variance` with
/// respect to `(M, b)` at fixed `z`, where `alpha = M z + b`.
pub fn partition_term(
    ys: &DVector<f64>,
    xs: &DMatrix<f64>,
    alpha: &AlphaVector,
    z: &DVector<f64>,
    cfg: &SpectralConfig,
) -> Result<EtaGradient> {
    let g = partition_alpha_gradient(ys, xs, alpha, cfg)?;
    ensure_dim("z", g.len(), z.len())?;
    Ok(EtaGradient {
        grad_m: &g * z.transpose(),
        grad_b: g,
    })
}

fn check_inputs(data: &PartitionedDataset, state: &VariationalState, prior: &PriorSpec, cfg: &SpectralConfig) -> Result<()> {
    cfg.validate()?;
    prior.check(cfg)?;
    ensure_dim("variational state", cfg.alpha_dim(), state.dim())?;
    if data.total_n() == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    ensure_dim("input columns", cfg.dim, data.dim())
}

/// Combine per-z data gradients `h_j` into the eta gradient
/// `(1/b) sum_j (h_j - g_j) z_j' + M^-T` and `(1/b) sum_j (h_j - g_j)`,
/// where `g_j` is the prior precision times `alpha_j`.
fn assemble(state: &VariationalState, prior: &PriorSpec, zs: &[DVector<f64>], alphas: &[DVector<f64>], data_grads: Vec<DVector<f64>>) -> EtaGradient {
    let dim = state.dim();
    let inv_b = 1.0 / zs.len() as f64;
    let mut out = EtaGradient::zeros(dim);
    for ((z, alpha), h) in zs.iter().zip(alphas).zip(data_grads) {
        let mut w = h;
        w -= prior_precision_times(alpha, prior);
        out.grad_m.ger(inv_b, &w, z, 1.0);
        out.grad_b.axpy(inv_b, &w, 1.0);
    }
    out.grad_m += state.m_inverse().transpose();
    out
}

/// Stochastic gradient from explicit draws:
/// `(1/(a b)) sum_k sum_j [p F_{i_k}(z_j) - d/d eta log(q/p)(z_j)]`.
pub fn stochastic_gradient_from(
    draws: &SampleDraws,
    data: &PartitionedDataset,
    state: &VariationalState,
    prior: &PriorSpec,
    cfg: &SpectralConfig,
) -> Result<EtaGradient> {
    check_inputs(data, state, prior, cfg)?;
    if draws.indices.is_empty() || draws.zs.is_empty() {
        return Err(Error::contract("gradient needs at least one block index and one z draw"));
    }
    if draws.indices.iter().any(|&i| i >= data.p()) {
        return Err(Error::contract("block index out of range"));
    }
    let alphas = draws
        .zs
        .iter()
        .map(|z| state.transform_flat(z))
        .collect::<Result<Vec<_>>>()?;
    let td = cfg.theta_dim();
    let a = draws.indices.len();
    let pairs: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|j| (0..a).map(move |k| (j, k)))
        .collect();
    let terms: Vec<DVector<f64>> = pairs
        .par_iter()
        .map(|&(j, k)| {
            let block = data.block(draws.indices[k]);
            let alpha = &alphas[j];
            let s = DVector::from_column_slice(&alpha.as_slice()[td..]);
            alpha_gradient_unchecked(&block.ys, &block.xs, &alpha.as_slice()[..td], &s, cfg)
        })
        .collect();
    let scale = data.p() as f64 / a as f64;
    let mut data_grads = vec![DVector::zeros(state.dim()); alphas.len()];
    for (&(j, _), t) in pairs.iter().zip(&terms) {
        data_grads[j].axpy(scale, t, 1.0);
    }
    let out = assemble(state, prior, &draws.zs, &alphas, data_grads);
    if !out.is_finite() {
        return Err(Error::Numerical("stochastic gradient is not finite".into()));
    }
    Ok(out)
}

/// Unbiased stochastic gradient, drawing from the streams of `plan.rng_seed`.
pub fn stochastic_gradient(
    plan: &GradientSamplePlan,
    data: &PartitionedDataset,
    state: &VariationalState,
    prior: &PriorSpec,
    cfg: &SpectralConfig,
) -> Result<EtaGradient> {
    plan.validate()?;
    let draws = SampleStreams::new(plan.rng_seed, 0).draw(
        plan.n_partition_samples,
        plan.n_z_samples,
        data.p(),
        state.dim(),
    );
    stochastic_gradient_from(&draws, data, state, prior, cfg)
}

/// Exact single-z gradient `sum_i F_i(z) - d/d eta log(q/p)(z)` over every block.
pub fn full_gradient(
    z: &DVector<f64>,
    data: &PartitionedDataset,
    state: &VariationalState,
    prior: &PriorSpec,
    cfg: &SpectralConfig,
) -> Result<EtaGradient> {
    check_inputs(data, state, prior, cfg)?;
    let alpha = state.transform_flat(z)?;
    let td = cfg.theta_dim();
    let s = DVector::from_column_slice(&alpha.as_slice()[td..]);
    let mut h = DVector::zeros(state.dim());
    for block in data.blocks() {
        h += alpha_gradient_unchecked(&block.ys, &block.xs, &alpha.as_slice()[..td], &s, cfg);
    }
    Ok(assemble(state, prior, std::slice::from_ref(z), &[alpha], vec![h]))
}

/// Monte-Carlo evidence lower bound with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Average of `log p(y | alpha)` alone.
    pub data_term: f64,
}

/// `E_z[log p(y|alpha) + log p(alpha) - log q(alpha)]` over `n_z` draws. Costs
/// a full pass over the data per draw.
pub fn elbo_estimate(
    n_z: usize,
    seed: u64,
    data: &PartitionedDataset,
    state: &VariationalState,
    prior: &PriorSpec,
    cfg: &SpectralConfig,
) -> Result<ElboEstimate> {
    if n_z == 0 {
        return Err(Error::contract("elbo estimate needs n_z >= 1"));
    }
    check_inputs(data, state, prior, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<DVector<f64>> = (0..n_z).map(|_| sample_z(&mut rng, state.dim())).collect();
    let td = cfg.theta_dim();
    let n = data.total_n() as f64;
    let log_norm = -0.5 * n * (2.0 * PI * cfg.noise_variance).ln();
    let samples: Vec<(f64, f64)> = zs
        .par_iter()
        .map(|z| -> Result<(f64, f64)> {
            let alpha = state.transform_flat(z)?;
            let s = DVector::from_column_slice(&alpha.as_slice()[td..]);
            let vv: f64 = data
                .blocks()
                .iter()
                .map(|b| residual_sq(&b.ys, &b.xs, &alpha.as_slice()[..td], &s, cfg))
                .sum();
            let ll = log_norm - 0.5 * vv / cfg.noise_variance;
            Ok((ll + log_prior_flat(&alpha, prior) - log_q(state, z)?, ll))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = n_z as f64;
    let value = samples.iter().map(|s| s.0).sum::<f64>() / k;
    let data_term = samples.iter().map(|s| s.1).sum::<f64>() / k;
    let std_error = if n_z > 1 {
        let var = samples.iter().map(|s| (s.0 - value).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(ElboEstimate {
        value,
        std_error,
        data_term,
    })
}
