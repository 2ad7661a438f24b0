//! Affine variational family `alpha = M z + b`, `z ~ N(0, I)`, its density
//! `q(alpha) = psi(z) / |det M|`, the diagonal Gaussian prior on `alpha`, and
//! the closed-form gradient of `log q(alpha) - log p(alpha)` at fixed `z`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::SpectralConfig;
use crate::gradient::EtaGradient;
use crate::localmodel::AlphaVector;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest reciprocal condition number accepted for `M`.
pub const MIN_RCOND: f64 = 1e-14;

/// Draw `z ~ psi = N(0, I)`.
pub fn sample_z<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}

/// `log psi(z)` for the standard normal base density.
pub fn log_psi(z: &DVector<f64>) -> f64 {
    -0.5 * z.norm_squared() - 0.5 * z.len() as f64 * LN_2PI
}

/// Diagonal prior `p(alpha) = N(0, blkdiag[Theta, Lambda])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Diagonal of `Theta`, one entry per frequency coordinate (`m d`).
    pub theta_prior_variance: Vec<f64>,
    /// Diagonal entry of `Lambda`, repeated `2m` times.
    pub lambda_diag: f64,
}

impl PriorSpec {
    pub fn new(theta_prior_variance: Vec<f64>, lambda_diag: f64) -> Result<Self> {
        let p = PriorSpec {
            theta_prior_variance,
            lambda_diag,
        };
        if p.theta_prior_variance.iter().any(|&v| !(v > 0.0 && v.is_finite()))
            || !(lambda_diag > 0.0 && lambda_diag.is_finite())
        {
            return Err(Error::contract("prior variances must be positive and finite"));
        }
        Ok(p)
    }

    /// `Theta` matching a squared exponential kernel with the given per-dimension
    /// lengthscales: each frequency coordinate gets variance `1 / (4 pi^2 l^2)`.
    pub fn from_lengthscales(lengthscales: &[f64], cfg: &SpectralConfig) -> Result<Self> {
        ensure_dim("lengthscales", cfg.dim, lengthscales.len())?;
        let per_dim: Vec<f64> = lengthscales
            .iter()
            .map(|&l| 1.0 / (4.0 * PI * PI * l * l))
            .collect();
        let theta = (0..cfg.n_freq).flat_map(|_| per_dim.iter().copied()).collect();
        Self::new(theta, cfg.lambda())
    }

    /// Default prior: lengthscale per input dimension set to the standard
    /// deviation of that column (1 for constant columns).
    pub fn from_inputs(xs: &DMatrix<f64>, cfg: &SpectralConfig) -> Result<Self> {
        ensure_dim("input columns", cfg.dim, xs.ncols())?;
        let n = xs.nrows();
        let scales: Vec<f64> = (0..cfg.dim)
            .map(|l| {
                if n < 2 {
                    return 1.0;
                }
                let col = xs.column(l);
                let mean = col.mean();
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self::from_lengthscales(&scales, cfg)
    }

    pub fn check(&self, cfg: &SpectralConfig) -> Result<()> {
        ensure_dim("prior theta variance", cfg.theta_dim(), self.theta_prior_variance.len())
    }

    /// Variance of coordinate `i` of `alpha`.
    pub fn variance(&self, i: usize) -> f64 {
        if i < self.theta_prior_variance.len() {
            self.theta_prior_variance[i]
        } else {
            self.lambda_diag
        }
    }

    pub fn dim(&self, cfg: &SpectralConfig) -> usize {
        self.theta_prior_variance.len() + cfg.feature_dim()
    }
}

/// `log p(alpha)` for a flat latent vector.
pub fn log_prior_flat(alpha: &DVector<f64>, prior: &PriorSpec) -> f64 {
    alpha
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let v = prior.variance(i);
            -0.5 * (LN_2PI + v.ln() + a * a / v)
        })
        .sum()
}

pub fn log_prior(alpha: &AlphaVector, prior: &PriorSpec) -> Result<f64> {
    ensure_dim("prior theta variance", alpha.theta.len(), prior.theta_prior_variance.len())?;
    Ok(log_prior_flat(&alpha.to_flat(), prior))
}

/// `d log p(alpha) / d alpha = -blkdiag[Theta^-1, Lambda^-1] alpha`, negated.
pub(crate) fn prior_precision_times(alpha: &DVector<f64>, prior: &PriorSpec) -> DVector<f64> {
    DVector::from_iterator(
        alpha.len(),
        alpha.iter().enumerate().map(|(i, a)| a / prior.variance(i)),
    )
}

/// Variational parameters `eta = (M, b)` with a cached inverse and log-determinant.
#[derive(Debug, Clone)]
pub struct VariationalState {
    m: DMatrix<f64>,
    b: DVector<f64>,
    m_inv: DMatrix<f64>,
    log_abs_det: f64,
    rcond: f64,
}

impl VariationalState {
    /// Factorize `m` (LU with partial pivoting). Fails if `m` is numerically singular.
    pub fn new(m: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let dim = b.len();
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::dim("affine matrix", dim, m.nrows().max(m.ncols())));
        }
        if m.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("variational parameters are not finite".into()));
        }
        let lu = m.clone().lu();
        let u = lu.u();
        let mut log_abs_det = 0.0;
        for i in 0..dim {
            let p = u[(i, i)].abs();
            if p == 0.0 {
                return Err(Error::Numerical("affine matrix is singular".into()));
            }
            log_abs_det += p.ln();
        }
        let m_inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Numerical("affine matrix is singular".into()))?;
        let rcond = 1.0 / (one_norm(&m) * one_norm(&m_inv));
        if !(rcond.is_finite() && rcond > MIN_RCOND) || !log_abs_det.is_finite() {
            return Err(Error::Numerical(format!(
                "affine matrix is ill-conditioned (rcond {rcond:e})"
            )));
        }
        Ok(VariationalState {
            m,
            b,
            m_inv,
            log_abs_det,
            rcond,
        })
    }

    /// Starting point: `M = 0.1 I`, `b = (theta ~ N(0, Theta), s = 0)`.
    pub fn initial<R: Rng + ?Sized>(prior: &PriorSpec, cfg: &SpectralConfig, rng: &mut R) -> Result<Self> {
        prior.check(cfg)?;
        let dim = cfg.alpha_dim();
        let mut b = DVector::zeros(dim);
        for (i, v) in prior.theta_prior_variance.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            b[i] = z * v.sqrt();
        }
        Self::new(DMatrix::identity(dim, dim) * 0.1, b)
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn m_inverse(&self) -> &DMatrix<f64> {
        &self.m_inv
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `log |det M|`.
    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    /// Reciprocal 1-norm condition number of `M`.
    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.m, self.b)
    }

    /// `M z + b` as a flat vector.
    pub fn transform_flat(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("z", self.dim(), z.len())?;
        Ok(&self.m * z + &self.b)
    }
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `alpha = M z + b`, split into frequencies and nuisance amplitudes.
pub fn transform(state: &VariationalState, z: &DVector<f64>, cfg: &SpectralConfig) -> Result<AlphaVector> {
    ensure_dim("variational state", cfg.alpha_dim(), state.dim())?;
    AlphaVector::from_flat(&state.transform_flat(z)?, cfg)
}

/// `log q(alpha) = log psi(z) - log |det M|` for `alpha = M z + b`.
pub fn log_q(state: &VariationalState, z: &DVector<f64>) -> Result<f64> {
    ensure_dim("z", state.dim(), z.len())?;
    Ok(log_psi(z) - state.log_abs_det)
}

/// Gradient of `log q(alpha) - log p(alpha)` with respect to `(M, b)` at fixed `z`:
/// `dM = -M^-T + g z'`, `db = g` with `g = blkdiag[Theta^-1, Lambda^-1] (M z + b)`.
pub fn kl_term_gradient(state: &VariationalState, z: &DVector<f64>, prior: &PriorSpec) -> Result<EtaGradient> {
    let alpha = state.transform_flat(z)?;
    if prior.theta_prior_variance.len() >= state.dim() {
        return Err(Error::dim("prior theta variance", state.dim(), prior.theta_prior_variance.len()));
    }
    let g = prior_precision_times(&alpha, prior);
    let mut grad_m = -state.m_inv.transpose();
    grad_m.ger(1.0, &g, z, 1.0);
    Ok(EtaGradient { grad_m, grad_b: g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SpectralConfig {
        SpectralConfig::new(2, 2, 1.3, 0.2).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> VariationalState {
        let m = DMatrix::from_fn(dim, dim, |i, j| {
            rng.random_range(-0.3..0.3) + if i == j { 1.0 } else { 0.0 }
        });
        let b = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        VariationalState::new(m, b).unwrap()
    }

    fn random_prior(rng: &mut ChaCha8Rng, c: &SpectralConfig) -> PriorSpec {
        PriorSpec::new(
            (0..c.theta_dim()).map(|_| rng.random_range(0.2..2.0)).collect(),
            c.lambda(),
        )
        .unwrap()
    }

    #[test]
    fn identity_transform_and_offset() {
        let c = cfg();
        let dim = c.alpha_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_z(&mut rng, dim);
        let id = VariationalState::new(DMatrix::identity(dim, dim), DVector::zeros(dim)).unwrap();
        assert_eq!(transform(&id, &z, &c).unwrap().to_flat(), z);

        let st = random_state(&mut rng, dim);
        let at_zero = transform(&st, &DVector::zeros(dim), &c).unwrap();
        assert_eq!(at_zero.to_flat(), st.b().clone());
        assert_eq!(at_zero.theta.as_slice(), &st.b().as_slice()[..c.theta_dim()]);
    }

    #[test]
    fn transform_matches_row_dot_products() {
        let c = cfg();
        let dim = c.alpha_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let st = random_state(&mut rng, dim);
            let z = sample_z(&mut rng, dim);
            let alpha = transform(&st, &z, &c).unwrap().to_flat();
            for i in 0..dim {
                let row: f64 = (0..dim).map(|j| st.m()[(i, j)] * z[j]).sum::<f64>() + st.b()[i];
                assert!((row - alpha[i]).abs() <= 1e-12 * row.abs().max(1.0));
            }
        }
        assert!(transform(&random_state(&mut rng, dim), &DVector::zeros(3), &c).is_err());
    }

    #[test]
    fn log_q_closed_forms() {
        let dim = 6;
        let id = VariationalState::new(DMatrix::identity(dim, dim), DVector::zeros(dim)).unwrap();
        let z = DVector::zeros(dim);
        let base = log_q(&id, &z).unwrap();
        assert_relative_eq!(base, -(dim as f64 / 2.0) * (2.0 * PI).ln(), epsilon = 1e-14);
        let twice = VariationalState::new(DMatrix::identity(dim, dim) * 2.0, DVector::zeros(dim)).unwrap();
        assert_relative_eq!(log_q(&twice, &z).unwrap(), base - dim as f64 * 2f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn log_det_matches_pivot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [1, 3, 8] {
            let st = random_state(&mut rng, dim);
            // Gaussian elimination with partial pivoting, written out
            let mut a = st.m().clone();
            let mut logdet = 0.0;
            for k in 0..dim {
                let p = (k..dim).max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs())).unwrap();
                a.swap_rows(k, p);
                logdet += a[(k, k)].abs().ln();
                for i in k + 1..dim {
                    let f = a[(i, k)] / a[(k, k)];
                    for j in k..dim {
                        a[(i, j)] -= f * a[(k, j)];
                    }
                }
            }
            assert!((st.log_abs_det() - logdet).abs() <= 1e-9 * logdet.abs().max(1.0));

            // row permutation leaves |det| unchanged
            let mut swapped = st.m().clone();
            if dim > 1 {
                swapped.swap_rows(0, dim - 1);
            }
            let s2 = VariationalState::new(swapped, st.b().clone()).unwrap();
            assert_relative_eq!(s2.log_abs_det(), st.log_abs_det(), epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let mut m = DMatrix::identity(3, 3);
        m[(2, 2)] = 0.0;
        assert!(matches!(VariationalState::new(m, DVector::zeros(3)), Err(Error::Numerical(_))));
        let mut near = DMatrix::identity(3, 3);
        near[(2, 2)] = 1e-17;
        assert!(VariationalState::new(near, DVector::zeros(3)).is_err());
    }

    #[test]
    fn density_matches_change_of_variables() {
        let c = cfg();
        let dim = c.alpha_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let st = random_state(&mut rng, dim);
            let z = sample_z(&mut rng, dim);
            let alpha = st.transform_flat(&z).unwrap();
            // dense N(alpha | b, M M')
            let cov = st.m() * st.m().transpose();
            let chol = cov.clone().cholesky().unwrap();
            let diff = &alpha - st.b();
            let maha = diff.dot(&chol.solve(&diff));
            let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            let dense = -0.5 * (maha + logdet + dim as f64 * (2.0 * PI).ln());
            let ours = log_q(&st, &z).unwrap();
            assert!((ours.exp() - dense.exp()).abs() <= 1e-8 * dense.exp());
        }
    }

    #[test]
    fn log_prior_closed_forms() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = random_prior(&mut rng, &c);
        let dim = c.alpha_dim();
        let zero = log_prior_flat(&DVector::zeros(dim), &prior);
        let expected: f64 = (0..dim).map(|i| -0.5 * (2.0 * PI * prior.variance(i)).ln()).sum();
        assert_relative_eq!(zero, expected, epsilon = 1e-12);
        for i in 0..dim {
            let mut a = DVector::zeros(dim);
            a[i] = 0.7;
            let diff = log_prior_flat(&a, &prior) - zero;
            assert_relative_eq!(diff, -0.5 * 0.49 / prior.variance(i), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_prior_matches_dense_gaussian() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = random_prior(&mut rng, &c);
        let dim = c.alpha_dim();
        let cov = DMatrix::from_fn(dim, dim, |i, j| if i == j { prior.variance(i) } else { 0.0 });
        let inv = cov.clone().try_inverse().unwrap();
        for _ in 0..10 {
            let a = sample_z(&mut rng, dim) * 1.5;
            let alpha = AlphaVector::from_flat(&a, &c).unwrap();
            let dense = -0.5 * ((a.transpose() * &inv * &a)[(0, 0)] + cov.determinant().ln() + dim as f64 * (2.0 * PI).ln());
            assert!((log_prior(&alpha, &prior).unwrap() - dense).abs() <= 1e-10 * dense.abs());
        }
    }

    #[test]
    fn prior_from_lengthscales() {
        let c = SpectralConfig::new(2, 3, 1.5, 0.1).unwrap();
        let p = PriorSpec::from_lengthscales(&[0.5, 2.0], &c).unwrap();
        assert_eq!(p.theta_prior_variance.len(), 6);
        assert_relative_eq!(p.theta_prior_variance[0], 1.0 / (PI * PI), epsilon = 1e-15);
        assert_relative_eq!(p.theta_prior_variance[5], 1.0 / (16.0 * PI * PI), epsilon = 1e-15);
        assert_eq!(p.lambda_diag, 0.5);
        assert!(PriorSpec::new(vec![1.0, -1.0], 1.0).is_err());
    }

    #[test]
    fn kl_gradient_closed_forms() {
        let c = cfg();
        let dim = c.alpha_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = random_prior(&mut rng, &c);
        let st = VariationalState::new(
            DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 } + 0.1 * (i as f64 - j as f64)),
            DVector::zeros(dim),
        )
        .unwrap();
        let g = kl_term_gradient(&st, &DVector::zeros(dim), &prior).unwrap();
        assert_relative_eq!(g.grad_m, -st.m_inverse().transpose(), epsilon = 1e-15);
        assert!(g.grad_b.iter().all(|&v| v == 0.0));

        let id = VariationalState::new(DMatrix::identity(dim, dim), DVector::zeros(dim)).unwrap();
        let z = sample_z(&mut rng, dim);
        let g = kl_term_gradient(&id, &z, &prior).unwrap();
        let pz = DVector::from_fn(dim, |i, _| z[i] / prior.variance(i));
        let expected = -DMatrix::<f64>::identity(dim, dim) + &pz * z.transpose();
        assert_relative_eq!(g.grad_m, expected, epsilon = 1e-14);
        assert_relative_eq!(g.grad_b, pz, epsilon = 1e-14);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let c = cfg();
        let dim = c.alpha_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..5 {
            let prior = random_prior(&mut rng, &c);
            let st = random_state(&mut rng, dim);
            let z = sample_z(&mut rng, dim);
            let g = kl_term_gradient(&st, &z, &prior).unwrap();
            let objective = |m: &DMatrix<f64>, b: &DVector<f64>| {
                let s = VariationalState::new(m.clone(), b.clone()).unwrap();
                log_q(&s, &z).unwrap() - log_prior_flat(&s.transform_flat(&z).unwrap(), &prior)
            };
            for i in 0..dim {
                for j in 0..dim {
                    let mut mp = st.m().clone();
                    let mut mm = st.m().clone();
                    mp[(i, j)] += h;
                    mm[(i, j)] -= h;
                    let fd = (objective(&mp, st.b()) - objective(&mm, st.b())) / (2.0 * h);
                    let an = g.grad_m[(i, j)];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "M[{i},{j}] {fd} vs {an}");
                }
                let mut bp = st.b().clone();
                let mut bm = st.b().clone();
                bp[i] += h;
                bm[i] -= h;
                let fd = (objective(st.m(), &bp) - objective(st.m(), &bm)) / (2.0 * h);
                assert!((fd - g.grad_b[i]).abs() <= 1e-5 * g.grad_b[i].abs().max(1.0));
            }
        }
    }
}
