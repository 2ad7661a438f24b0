//! Per-block linear algebra: the regularized local Gram matrix
//! `Gamma_k = Phi(X_k) Phi(X_k)' + noise_variance Lambda^-1` and the
//! gamma-mixed test conditional built on top of it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{ensure_dim, Error, Result};
use crate::features::{basis_into, feature_matrix_unchecked, FrequencyBlock, SpectralConfig};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Latent vector `vec(theta, s)`: frequencies first, then the `2m` nuisance amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    pub theta: FrequencyBlock,
    pub s: DVector<f64>,
}

impl AlphaVector {
    pub fn new(theta: FrequencyBlock, s: DVector<f64>, cfg: &SpectralConfig) -> Result<Self> {
        ensure_dim("frequency block", cfg.theta_dim(), theta.len())?;
        ensure_dim("nuisance vector", cfg.feature_dim(), s.len())?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("nuisance vector has non-finite entries"));
        }
        Ok(AlphaVector { theta, s })
    }

    /// Split a flat `m d + 2m` vector.
    pub fn from_flat(alpha: &DVector<f64>, cfg: &SpectralConfig) -> Result<Self> {
        ensure_dim("alpha", cfg.alpha_dim(), alpha.len())?;
        let td = cfg.theta_dim();
        let theta = FrequencyBlock::from_slice(&alpha.as_slice()[..td])?;
        let s = DVector::from_column_slice(&alpha.as_slice()[td..]);
        Self::new(theta, s, cfg)
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.theta.len() + self.s.len());
        v.as_mut_slice()[..self.theta.len()].copy_from_slice(self.theta.as_slice());
        v.as_mut_slice()[self.theta.len()..].copy_from_slice(self.s.as_slice());
        v
    }
}

/// Moments of a Gaussian prediction at one test input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Factorized local Gram matrix of one partition block for one frequency sample.
#[derive(Debug, Clone)]
pub struct LocalGram {
    gamma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    phi_y: DVector<f64>,
    weights: DVector<f64>,
    block_id: usize,
    jitter: f64,
}

impl LocalGram {
    /// `Gamma_k`, including any jitter that was needed to factorize it.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Lower-triangular factor `L` with `L L' = Gamma_k`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `Phi(X_k) y_k`.
    pub fn phi_y(&self) -> &DVector<f64> {
        &self.phi_y
    }

    /// `Gamma_k^-1 Phi(X_k) y_k`, the local posterior mean of `s`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn block_id(&self) -> usize {
        self.block_id
    }

    /// Diagonal jitter added before factorization (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `v' Gamma_k^-1 v` through the triangular factor.
    pub fn quad_inv(&self, v: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let w = l
            .solve_lower_triangular(v)
            .expect("cholesky factor has a positive diagonal");
        w.norm_squared()
    }
}

/// Factorize `gamma`, escalating diagonal jitter `1e-10 .. 1e-4` times the mean
/// diagonal by factors of ten.
pub(crate) fn factorize_with_jitter(
    gamma: DMatrix<f64>,
    block_id: usize,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(gamma.clone()) {
        return Ok((gamma, chol, 0.0));
    }
    let n = gamma.nrows().max(1);
    let scale = gamma.trace() / n as f64;
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut jittered = gamma.clone();
        for i in 0..gamma.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered.clone()) {
            return Ok((jittered, chol, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Factorization {
        block: block_id,
        jitter: JITTER_MAX * scale,
    })
}

/// Build and factorize `Gamma_k` for rows `xs` (`n_k x d`) with targets `ys`.
pub fn build_local_gram(
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    theta: &FrequencyBlock,
    cfg: &SpectralConfig,
    block_id: usize,
) -> Result<LocalGram> {
    ensure_dim("block targets", xs.nrows(), ys.len())?;
    if xs.nrows() > 0 {
        ensure_dim("input columns", cfg.dim, xs.ncols())?;
    }
    ensure_dim("frequency block", cfg.theta_dim(), theta.len())?;
    let phi = feature_matrix_unchecked(xs, theta.as_slice(), cfg);
    let mut gamma = &phi * phi.transpose();
    let ridge = cfg.noise_variance / cfg.lambda();
    for i in 0..cfg.feature_dim() {
        gamma[(i, i)] += ridge;
    }
    let phi_y = &phi * ys;
    let (gamma, chol, jitter) = factorize_with_jitter(gamma, block_id)?;
    let weights = chol.solve(&phi_y);
    Ok(LocalGram {
        gamma,
        chol,
        phi_y,
        weights,
        block_id,
        jitter,
    })
}

fn check_mix(gamma_mix: f64) -> Result<()> {
    if gamma_mix.is_finite() && gamma_mix.abs() <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "gamma mix {gamma_mix} outside [-1, 1]; the conditional variance would be negative"
        )))
    }
}

/// Conditional moments from a precomputed feature vector.
pub(crate) fn conditional_from_phi(
    phi: &DVector<f64>,
    local: &LocalGram,
    s: &DVector<f64>,
    gamma_mix: f64,
    noise_variance: f64,
) -> PredictiveMoments {
    let global = if gamma_mix != 0.0 { phi.dot(s) } else { 0.0 };
    let local_mean = phi.dot(&local.weights);
    let mean = gamma_mix * global + (1.0 - gamma_mix) * local_mean;
    let variance = (1.0 - gamma_mix * gamma_mix) * noise_variance * local.quad_inv(phi);
    PredictiveMoments { mean, variance }
}

/// Test conditional at `x_star`:
/// `mean = g phi's + (1 - g) phi' Gamma^-1 Phi y`,
/// `variance = (1 - g^2) noise_variance phi' Gamma^-1 phi`.
///
/// `local` must have been built with the frequencies of `alpha`.
pub fn test_conditional(
    x_star: &[f64],
    local: &LocalGram,
    alpha: &AlphaVector,
    gamma_mix: f64,
    cfg: &SpectralConfig,
) -> Result<PredictiveMoments> {
    check_mix(gamma_mix)?;
    ensure_dim("input", cfg.dim, x_star.len())?;
    ensure_dim("frequency block", cfg.theta_dim(), alpha.theta.len())?;
    ensure_dim("nuisance vector", cfg.feature_dim(), alpha.s.len())?;
    let mut phi = DVector::zeros(cfg.feature_dim());
    basis_into(x_star, alpha.theta.as_slice(), cfg.dim, phi.as_mut_slice());
    Ok(conditional_from_phi(&phi, local, &alpha.s, gamma_mix, cfg.noise_variance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{approx_kernel, basis_vector, feature_matrix};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        cfg: SpectralConfig,
        xs: DMatrix<f64>,
        ys: DVector<f64>,
        alpha: AlphaVector,
        x_star: Vec<f64>,
    }

    fn instance(rng: &mut ChaCha8Rng, n: usize, d: usize, m: usize) -> Instance {
        let cfg = SpectralConfig::new(d, m, rng.random_range(0.5..2.0), rng.random_range(0.05..0.5)).unwrap();
        let xs = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let ys = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let theta: Vec<f64> = (0..cfg.theta_dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let s = DVector::from_fn(cfg.feature_dim(), |_, _| rng.random_range(-1.0..1.0));
        let alpha = AlphaVector::new(FrequencyBlock::from_slice(&theta).unwrap(), s, &cfg).unwrap();
        let x_star = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Instance { cfg, xs, ys, alpha, x_star }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn empty_block_gram() {
        let cfg = SpectralConfig::new(2, 3, 2.0, 0.5).unwrap();
        let theta = FrequencyBlock::from_slice(&[0.1; 6]).unwrap();
        let g = build_local_gram(&DMatrix::zeros(0, 2), &DVector::zeros(0), &theta, &cfg, 7).unwrap();
        let expected = DMatrix::<f64>::identity(6, 6) * (0.5 * 3.0 / 2.0);
        assert_relative_eq!(g.gamma(), &expected, epsilon = 1e-15);
        assert!(g.phi_y().iter().all(|&v| v == 0.0));
        assert_eq!(g.block_id(), 7);
    }

    #[test]
    fn gram_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let inst = instance(&mut rng, 25, 3, 4);
            let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, &inst.cfg, 0).unwrap();
            // explicit triple loop
            let phi = feature_matrix(&inst.xs, &inst.alpha.theta, &inst.cfg).unwrap();
            let k = inst.cfg.feature_dim();
            let mut oracle = DMatrix::zeros(k, k);
            for a in 0..k {
                for b in 0..k {
                    let mut acc = 0.0;
                    for j in 0..inst.xs.nrows() {
                        acc += phi[(a, j)] * phi[(b, j)];
                    }
                    oracle[(a, b)] = acc;
                }
                oracle[(a, a)] += inst.cfg.noise_variance / inst.cfg.lambda();
            }
            assert!((g.gamma() - &oracle).norm() / oracle.norm() <= 1e-12);
            let l = g.chol_factor();
            assert!((&l * l.transpose() - g.gamma()).norm() / g.gamma().norm() <= 1e-8);
            assert_eq!(g.jitter(), 0.0);
        }
    }

    #[test]
    fn matrix_inversion_lemma_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [1, 5, 17, 30] {
            let inst = instance(&mut rng, n, 2, 3);
            let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, &inst.cfg, 0).unwrap();
            let phi = feature_matrix(&inst.xs, &inst.alpha.theta, &inst.cfg).unwrap();
            let sn2 = inst.cfg.noise_variance;
            let gamma_inv = g.gamma().clone().try_inverse().unwrap();
            let lemma = (DMatrix::identity(n, n) - phi.transpose() * gamma_inv * &phi) / sn2;
            let direct = (phi.transpose() * &phi * inst.cfg.lambda() + DMatrix::identity(n, n) * sn2)
                .try_inverse()
                .unwrap();
            assert!((&lemma - &direct).norm() / direct.norm() <= 1e-8);
        }
    }

    #[test]
    fn gamma_one_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inst = instance(&mut rng, 10, 2, 3);
        let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, &inst.cfg, 0).unwrap();
        let mo = test_conditional(&inst.x_star, &g, &inst.alpha, 1.0, &inst.cfg).unwrap();
        let phi = basis_vector(&inst.x_star, &inst.alpha.theta, &inst.cfg).unwrap();
        assert_eq!(mo.variance, 0.0);
        assert_relative_eq!(mo.mean, phi.dot(&inst.alpha.s), epsilon = 1e-14);
    }

    #[test]
    fn gamma_zero_ignores_nuisance() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inst = instance(&mut rng, 10, 2, 3);
        let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, &inst.cfg, 0).unwrap();
        let a = test_conditional(&inst.x_star, &g, &inst.alpha, 0.0, &inst.cfg).unwrap();
        let mut other = inst.alpha.clone();
        other.s *= -3.5;
        other.s[0] += 10.0;
        let b = test_conditional(&inst.x_star, &g, &other, 0.0, &inst.cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mix_outside_unit_interval_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let inst = instance(&mut rng, 4, 2, 2);
        let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, &inst.cfg, 0).unwrap();
        for bad in [1.0001, -1.5, f64::NAN] {
            assert!(matches!(
                test_conditional(&inst.x_star, &g, &inst.alpha, bad, &inst.cfg),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn marginalizing_nuisance_recovers_local_predictive() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let inst = instance(&mut rng, 12, 2, 3);
            let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, &inst.cfg, 0).unwrap();
            let sn2 = inst.cfg.noise_variance;
            let gamma_inv = g.gamma().clone().try_inverse().unwrap();
            let mu_bar = &gamma_inv * g.phi_y();
            let sigma_bar = &gamma_inv * sn2;
            let phi = basis_vector(&inst.x_star, &inst.alpha.theta, &inst.cfg).unwrap();
            for mix in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                // mean is affine in s, so its expectation is the mean at s = mu_bar
                let at_mu = AlphaVector::new(inst.alpha.theta.clone(), mu_bar.clone(), &inst.cfg).unwrap();
                let mo = test_conditional(&inst.x_star, &g, &at_mu, mix, &inst.cfg).unwrap();
                let target_mean = phi.dot(&mu_bar);
                assert!(rel(mo.mean, target_mean) <= 1e-8);
                let spread = mix * mix * (phi.transpose() * &sigma_bar * &phi)[(0, 0)];
                let target_var = sn2 * (phi.transpose() * &gamma_inv * &phi)[(0, 0)];
                assert!(rel(mo.variance + spread, target_var) <= 1e-8);
            }
        }
    }

    #[test]
    fn zero_mix_is_standard_gp_on_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [3, 12, 30] {
            let inst = instance(&mut rng, n, 2, 3);
            let cfg = &inst.cfg;
            let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, cfg, 0).unwrap();
            let mo = test_conditional(&inst.x_star, &g, &inst.alpha, 0.0, cfg).unwrap();
            let row = |j: usize| (0..2).map(|l| inst.xs[(j, l)]).collect::<Vec<_>>();
            let kxx = DMatrix::from_fn(n, n, |a, b| approx_kernel(&row(a), &row(b), &inst.alpha.theta, cfg).unwrap());
            let ks = DVector::from_fn(n, |a, _| approx_kernel(&row(a), &inst.x_star, &inst.alpha.theta, cfg).unwrap());
            let xi = (kxx + DMatrix::identity(n, n) * cfg.noise_variance).try_inverse().unwrap();
            let gp_mean = (ks.transpose() * &xi * &inst.ys)[(0, 0)];
            let kss = approx_kernel(&inst.x_star, &inst.x_star, &inst.alpha.theta, cfg).unwrap();
            let gp_var = kss - (ks.transpose() * &xi * &ks)[(0, 0)];
            assert!(rel(mo.mean, gp_mean) <= 1e-8, "{} vs {}", mo.mean, gp_mean);
            assert!(rel(mo.variance, gp_var) <= 1e-8, "{} vs {}", mo.variance, gp_var);
        }
    }

    #[test]
    fn variance_nonnegative_and_mean_linear_in_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..30 {
            let n = rng.random_range(0..=20);
            let m = rng.random_range(1..=4);
            let inst = instance(&mut rng, n, 2, m);
            let g = build_local_gram(&inst.xs, &inst.ys, &inst.alpha.theta, &inst.cfg, 0).unwrap();
            let doubled = build_local_gram(&inst.xs, &(&inst.ys * 2.0), &inst.alpha.theta, &inst.cfg, 0).unwrap();
            for mix in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                let mo = test_conditional(&inst.x_star, &g, &inst.alpha, mix, &inst.cfg).unwrap();
                assert!(mo.variance >= 0.0);
            }
            let a = test_conditional(&inst.x_star, &g, &inst.alpha, 0.0, &inst.cfg).unwrap();
            let b = test_conditional(&inst.x_star, &doubled, &inst.alpha, 0.0, &inst.cfg).unwrap();
            assert_relative_eq!(b.mean, 2.0 * a.mean, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn jitter_rescues_semidefinite_gram() {
        let mut m = DMatrix::from_element(3, 3, 1.0);
        m[(2, 2)] = 1.0;
        let (g, _, jitter) = factorize_with_jitter(m, 4).unwrap();
        assert!(jitter > 0.0);
        assert!(g[(0, 0)] > 1.0);

        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(factorize_with_jitter(bad, 9), Err(Error::Factorization { block: 9, .. })));
    }
}
