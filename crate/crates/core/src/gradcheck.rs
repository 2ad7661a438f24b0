//! Central finite-difference checks of the analytic `(M, b)` gradients on
//! random instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::features::SpectralConfig;
use crate::gradient::{log_likelihood, partition_term, EtaGradient};
use crate::variational::{kl_term_gradient, log_prior_flat, log_q, sample_z, transform, PriorSpec, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_err_partition: f64,
    pub max_rel_err_kl: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Run `instances` random checks (`D <= 12`, at most 15 points per block).
pub fn gradcheck(instances: usize, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_part: f64 = 0.0;
    let mut worst_kl: f64 = 0.0;
    for _ in 0..instances {
        let (d, m) = [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (1, 3)][rng.random_range(0..6)];
        let cfg = SpectralConfig::new(d, m, rng.random_range(0.5..2.0), rng.random_range(0.05..0.5))?;
        let prior = PriorSpec::from_lengthscales(&vec![rng.random_range(0.3..1.5); d], &cfg)?;
        let dim = cfg.alpha_dim();
        let n = rng.random_range(1..=15);
        let xs = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let ys = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mm = DMatrix::from_fn(dim, dim, |i, j| rng.random_range(-0.2..0.2) + if i == j { 0.5 } else { 0.0 });
        let b = DVector::from_fn(dim, |_, _| rng.random_range(-0.5..0.5));
        let z = sample_z(&mut rng, dim);
        let state = VariationalState::new(mm, b)?;

        let analytic = partition_term(&ys, &xs, &transform(&state, &z, &cfg)?, &z, &cfg)?;
        let numeric = central_difference(&state, |s| log_likelihood(&ys, &xs, &transform(s, &z, &cfg)?, &cfg))?;
        worst_part = worst_part.max(rel_err(&analytic, &numeric));

        let analytic = kl_term_gradient(&state, &z, &prior)?;
        let numeric = central_difference(&state, |s| Ok(log_q(s, &z)? - log_prior_flat(&s.transform_flat(&z)?, &prior)))?;
        worst_kl = worst_kl.max(rel_err(&analytic, &numeric));
    }
    Ok(GradcheckReport {
        instances,
        max_rel_err_partition: worst_part,
        max_rel_err_kl: worst_kl,
        tolerance,
        passed: worst_part <= tolerance && worst_kl <= tolerance,
    })
}

fn central_difference(state: &VariationalState, f: impl Fn(&VariationalState) -> Result<f64>) -> Result<Vec<f64>> {
    let dim = state.dim();
    let base: Vec<f64> = state.m().iter().chain(state.b().iter()).copied().collect();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let h = 1e-6 * base[i].abs().max(1.0);
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            let s = VariationalState::new(
                DMatrix::from_column_slice(dim, dim, &v[..dim * dim]),
                DVector::from_column_slice(&v[dim * dim..]),
            )?;
            f(&s)
        };
        out.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    Ok(out)
}

/// Largest coordinate error relative to the largest numeric coordinate.
fn rel_err(analytic: &EtaGradient, numeric: &[f64]) -> f64 {
    let a = analytic.to_flat();
    let scale = numeric.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-8);
    a.iter().zip(numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
