//! Stochastic gradient ascent over `eta = (M, b)`, with optional point
//! estimation of the noise and signal variances in log space.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::SpectralConfig;
use crate::gradient::{
    elbo_estimate, residual_sq, stochastic_gradient_from, EtaGradient, GradientSamplePlan, SampleDraws, SampleStreams,
};
use crate::localmodel::AlphaVector;
use crate::partition::PartitionedDataset;
use crate::variational::{PriorSpec, VariationalState};

/// Updates that push the reciprocal condition number of `M` below this are rejected.
pub const RCOND_GUARD: f64 = 1e-13;
const MAX_HALVINGS: usize = 5;
const ACCUMULATOR_FLOOR: f64 = 1e-8;

/// `rho_t = base_step / (1 + t)^decay_power`, optionally with per-coordinate rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub base_step: f64,
    pub decay_power: f64,
    /// Divide each coordinate by the root of its accumulated squared gradients.
    pub adaptive: bool,
}

impl StepSchedule {
    pub fn rate(&self, t: usize) -> f64 {
        self.base_step / (1.0 + t as f64).powf(self.decay_power)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            base_step: 0.25,
            decay_power: 0.7,
            adaptive: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub plan: GradientSamplePlan,
    pub step_schedule: StepSchedule,
    pub learn_variances: bool,
    /// Invoke the checkpoint callback every this many iterations (0 = never).
    pub checkpoint_every: usize,
    /// Master seed of the per-iteration sample streams.
    pub seed: u64,
    /// Evaluate the ELBO every this many iterations (0 = never).
    pub elbo_every: usize,
    pub elbo_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            plan: GradientSamplePlan::default(),
            step_schedule: StepSchedule::default(),
            learn_variances: false,
            checkpoint_every: 0,
            seed: 0,
            elbo_every: 0,
            elbo_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.iterations == 0 {
            return Err(Error::contract("training needs at least one iteration"));
        }
        let s = &self.step_schedule;
        if !(s.base_step > 0.0 && s.base_step.is_finite()) {
            return Err(Error::contract("base step must be positive"));
        }
        if !(s.decay_power > 0.5 && s.decay_power <= 1.0) {
            return Err(Error::contract("decay power must lie in (0.5, 1]"));
        }
        if self.elbo_every > 0 && self.elbo_samples == 0 {
            return Err(Error::contract("elbo monitoring needs at least one sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub step_size: f64,
    pub gradient_norm: f64,
    pub elbo: Option<f64>,
    pub wall_clock_ms: f64,
    /// Step halvings needed to keep `M` invertible.
    pub halvings: usize,
    pub noise_variance: f64,
    pub signal_variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<IterationRecord>,
}

/// Everything needed to continue training: the current parameters, the
/// adaptive accumulator and the next iteration index.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub state: VariationalState,
    pub prior: PriorSpec,
    pub cfg: SpectralConfig,
    pub next_iteration: usize,
    pub accumulator: Vec<f64>,
    pub trace: TrainTrace,
}

impl TrainingState {
    pub fn start(state: VariationalState, prior: PriorSpec, cfg: SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        prior.check(&cfg)?;
        ensure_dim("variational state", cfg.alpha_dim(), state.dim())?;
        let d = state.dim();
        Ok(TrainingState {
            state,
            prior,
            cfg,
            next_iteration: 0,
            accumulator: vec![0.0; d * d + d + 2],
            trace: TrainTrace::default(),
        })
    }
}

/// Derivatives of `log p(y_i | alpha) + log p(s)` with respect to
/// `log noise_variance` and `log signal_variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceGradient {
    pub d_log_sn2: f64,
    pub d_log_ss2: f64,
}

/// `d/d log sn2 = 0.5 v'v / sn2 - 0.5 n_i` (likelihood only) and
/// `d/d log ss2 = -m + 0.5 |s|^2 / lambda` (amplitude prior only).
pub fn variance_gradients(
    ys: &DVector<f64>,
    xs: &DMatrix<f64>,
    alpha: &AlphaVector,
    cfg: &SpectralConfig,
) -> Result<VarianceGradient> {
    ensure_dim("block targets", xs.nrows(), ys.len())?;
    if xs.nrows() > 0 {
        ensure_dim("input columns", cfg.dim, xs.ncols())?;
    }
    ensure_dim("frequency block", cfg.theta_dim(), alpha.theta.len())?;
    ensure_dim("nuisance vector", cfg.feature_dim(), alpha.s.len())?;
    let vv = residual_sq(ys, xs, alpha.theta.as_slice(), &alpha.s, cfg);
    Ok(VarianceGradient {
        d_log_sn2: 0.5 * vv / cfg.noise_variance - 0.5 * ys.len() as f64,
        d_log_ss2: -(cfg.n_freq as f64) + 0.5 * alpha.s.norm_squared() / cfg.lambda(),
    })
}

/// Source of the ascent direction at each iteration. The model gradient is
/// [`ModelGradient`]; tests substitute surrogates.
pub trait GradientSource {
    fn gradient(
        &self,
        iteration: usize,
        tcfg: &TrainConfig,
        data: &PartitionedDataset,
        state: &VariationalState,
        prior: &PriorSpec,
        cfg: &SpectralConfig,
    ) -> Result<(EtaGradient, Option<VarianceGradient>)>;
}

/// The unbiased stochastic ELBO gradient, with samples keyed by `(seed, iteration)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelGradient;

impl ModelGradient {
    pub fn draws(iteration: usize, tcfg: &TrainConfig, p: usize, dim: usize) -> SampleDraws {
        SampleStreams::new(tcfg.seed, iteration as u64).draw(
            tcfg.plan.n_partition_samples,
            tcfg.plan.n_z_samples,
            p,
            dim,
        )
    }
}

impl GradientSource for ModelGradient {
    fn gradient(
        &self,
        iteration: usize,
        tcfg: &TrainConfig,
        data: &PartitionedDataset,
        state: &VariationalState,
        prior: &PriorSpec,
        cfg: &SpectralConfig,
    ) -> Result<(EtaGradient, Option<VarianceGradient>)> {
        let draws = Self::draws(iteration, tcfg, data.p(), state.dim());
        let eta = stochastic_gradient_from(&draws, data, state, prior, cfg)?;
        if !tcfg.learn_variances {
            return Ok((eta, None));
        }
        let a = draws.indices.len() as f64;
        let b = draws.zs.len() as f64;
        let p = data.p() as f64;
        let mut total = VarianceGradient {
            d_log_sn2: 0.0,
            d_log_ss2: 0.0,
        };
        for z in &draws.zs {
            let alpha = AlphaVector::from_flat(&state.transform_flat(z)?, cfg)?;
            for (k, &i) in draws.indices.iter().enumerate() {
                let blk = data.block(i);
                let g = variance_gradients(&blk.ys, &blk.xs, &alpha, cfg)?;
                total.d_log_sn2 += p * g.d_log_sn2 / (a * b);
                if k == 0 {
                    total.d_log_ss2 += g.d_log_ss2 / b;
                }
            }
        }
        Ok((eta, Some(total)))
    }
}

/// Train from scratch for `tcfg.iterations` steps with the model gradient.
pub fn train(
    data: &PartitionedDataset,
    init: VariationalState,
    prior: PriorSpec,
    cfg: SpectralConfig,
    tcfg: &TrainConfig,
) -> Result<TrainingState> {
    let start = TrainingState::start(init, prior, cfg)?;
    train_from(data, start, tcfg, &ModelGradient, &mut |_| Ok(()))
}

/// Continue training from `start` until `tcfg.iterations` total iterations.
/// `on_checkpoint` sees the state after every `checkpoint_every` iterations.
pub fn train_from<G: GradientSource + ?Sized>(
    data: &PartitionedDataset,
    mut current: TrainingState,
    tcfg: &TrainConfig,
    source: &G,
    on_checkpoint: &mut dyn FnMut(&TrainingState) -> Result<()>,
) -> Result<TrainingState> {
    tcfg.validate()?;
    let d = current.state.dim();
    ensure_dim("accumulator", d * d + d + 2, current.accumulator.len())?;
    for t in current.next_iteration..tcfg.iterations {
        let clock = Instant::now();
        let (grad, var_grad) = source.gradient(t, tcfg, data, &current.state, &current.prior, &current.cfg)?;
        ensure_dim("gradient", d, grad.dim())?;
        let mut flat = grad.to_flat();
        if tcfg.learn_variances {
            let vg = var_grad.unwrap_or(VarianceGradient {
                d_log_sn2: 0.0,
                d_log_ss2: 0.0,
            });
            flat.push(vg.d_log_sn2);
            flat.push(vg.d_log_ss2);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("gradient is not finite at iteration {t}")));
        }
        let gradient_norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if tcfg.step_schedule.adaptive {
            for (acc, g) in current.accumulator.iter_mut().zip(flat.iter_mut()) {
                *acc += *g * *g;
                *g /= acc.max(ACCUMULATOR_FLOOR).sqrt();
            }
        }
        let direction = EtaGradient::from_flat(&flat[..d * d + d], d)?;
        let rho = tcfg.step_schedule.rate(t);

        let mut accepted = None;
        let mut last_rcond = 0.0;
        for halvings in 0..=MAX_HALVINGS {
            let step = rho * 0.5f64.powi(halvings as i32);
            let m = current.state.m() + &direction.grad_m * step;
            let b = current.state.b() + &direction.grad_b * step;
            match VariationalState::new(m, b) {
                Ok(next) if next.rcond() >= RCOND_GUARD => {
                    accepted = Some((next, step, halvings));
                    break;
                }
                Ok(next) => last_rcond = next.rcond(),
                Err(Error::Numerical(_)) => last_rcond = 0.0,
                Err(e) => return Err(e),
            }
        }
        let Some((next, step, halvings)) = accepted else {
            return Err(Error::Numerical(format!(
                "update at iteration {t} leaves M singular after {MAX_HALVINGS} step halvings (rcond {last_rcond:e})"
            )));
        };
        current.state = next;
        if tcfg.learn_variances {
            let cfg = &mut current.cfg;
            cfg.noise_variance = (cfg.noise_variance.ln() + step * flat[d * d + d]).exp();
            cfg.signal_variance = (cfg.signal_variance.ln() + step * flat[d * d + d + 1]).exp();
            cfg.validate()
                .map_err(|_| Error::Numerical(format!("variances left the positive range at iteration {t}")))?;
            current.prior.lambda_diag = cfg.lambda();
        }
        let elbo = if tcfg.elbo_every > 0 && (t + 1) % tcfg.elbo_every == 0 {
            Some(elbo_estimate(tcfg.elbo_samples, tcfg.seed ^ t as u64, data, &current.state, &current.prior, &current.cfg)?.value)
        } else {
            None
        };
        current.trace.records.push(IterationRecord {
            iter: t,
            step_size: step,
            gradient_norm,
            elbo,
            wall_clock_ms: clock.elapsed().as_secs_f64() * 1e3,
            halvings,
            noise_variance: current.cfg.noise_variance,
            signal_variance: current.cfg.signal_variance,
        });
        current.next_iteration = t + 1;
        if tcfg.checkpoint_every > 0 && (t + 1) % tcfg.checkpoint_every == 0 {
            on_checkpoint(&current)?;
        }
    }
    Ok(current)
}
