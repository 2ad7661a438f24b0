//! Monte-Carlo predictive moments and the RMSE / MNLP metrics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::{basis_into, SpectralConfig};
use crate::localmodel::{build_local_gram, conditional_from_phi, PredictiveMoments};
use crate::partition::{assign_block, PartitionedDataset};
use crate::variational::{sample_z, PriorSpec, VariationalState};

const SAMPLE_CHUNK: usize = 64;
const NEGATIVE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Posterior samples `r`.
    pub n_samples: usize,
    /// Mix between the global (`1`) and local (`0`) test conditional.
    pub gamma_mix: f64,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            n_samples: 100,
            gamma_mix: 0.0,
            seed: 0,
        }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::contract("prediction needs at least one sample"));
        }
        if !(self.gamma_mix.is_finite() && self.gamma_mix.abs() <= 1.0) {
            return Err(Error::contract(format!("gamma mix {} outside [-1, 1]", self.gamma_mix)));
        }
        Ok(())
    }
}

/// A trained model: variational posterior plus the partitioned training data
/// the local predictors condition on.
#[derive(Debug, Clone)]
pub struct Model {
    pub state: VariationalState,
    pub prior: PriorSpec,
    pub cfg: SpectralConfig,
    pub partition: PartitionedDataset,
}

impl Model {
    pub fn new(state: VariationalState, prior: PriorSpec, cfg: SpectralConfig, partition: PartitionedDataset) -> Result<Self> {
        cfg.validate()?;
        prior.check(&cfg)?;
        ensure_dim("variational state", cfg.alpha_dim(), state.dim())?;
        ensure_dim("partition input columns", cfg.dim, partition.dim())?;
        Ok(Model {
            state,
            prior,
            cfg,
            partition,
        })
    }
}

/// Predictions for a batch of test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub moments: Vec<PredictiveMoments>,
    /// Points whose variance estimate was negative and clamped to zero.
    pub clamped: usize,
    /// Clamped points whose negative part exceeded round-off.
    pub negative_warnings: usize,
}

/// Predict every row of `xs` (`n_test x d`) with one shared set of `r` base
/// samples. Each sample builds one local Gram per block that has test points.
pub fn predict_batch(xs: &DMatrix<f64>, model: &Model, pcfg: &PredictConfig) -> Result<BatchPrediction> {
    pcfg.validate()?;
    let cfg = &model.cfg;
    let n_test = xs.nrows();
    if n_test > 0 {
        ensure_dim("input columns", cfg.dim, xs.ncols())?;
    }
    let rows: Vec<Vec<f64>> = (0..n_test).map(|j| xs.row(j).iter().copied().collect()).collect();
    let p = model.partition.p();
    let mut by_block: Vec<Vec<usize>> = vec![Vec::new(); p];
    for (j, row) in rows.iter().enumerate() {
        by_block[assign_block(row, &model.partition)?].push(j);
    }
    let active: Vec<usize> = (0..p).filter(|&k| !by_block[k].is_empty()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let zs: Vec<DVector<f64>> = (0..pcfg.n_samples).map(|_| sample_z(&mut rng, model.state.dim())).collect();

    let td = cfg.theta_dim();
    let mut sum_mean = vec![0.0; n_test];
    let mut sum_second = vec![0.0; n_test];
    for chunk in zs.chunks(SAMPLE_CHUNK) {
        let per_sample: Vec<Vec<(f64, f64)>> = chunk
            .par_iter()
            .map(|z| -> Result<Vec<(f64, f64)>> {
                let alpha = model.state.transform_flat(z)?;
                let theta = crate::features::FrequencyBlock::from_slice(&alpha.as_slice()[..td])?;
                let s = DVector::from_column_slice(&alpha.as_slice()[td..]);
                let mut out = vec![(0.0, 0.0); n_test];
                let mut phi = DVector::zeros(cfg.feature_dim());
                for &k in &active {
                    let block = model.partition.block(k);
                    let local = build_local_gram(&block.xs, &block.ys, &theta, cfg, k)?;
                    for &j in &by_block[k] {
                        basis_into(&rows[j], theta.as_slice(), cfg.dim, phi.as_mut_slice());
                        let c = conditional_from_phi(&phi, &local, &s, pcfg.gamma_mix, cfg.noise_variance);
                        out[j] = (c.mean, c.variance);
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for sample in per_sample {
            for (j, (mu, var)) in sample.into_iter().enumerate() {
                sum_mean[j] += mu;
                sum_second[j] += var + mu * mu;
            }
        }
    }

    let r = pcfg.n_samples as f64;
    let mut clamped = 0;
    let mut negative_warnings = 0;
    let moments = (0..n_test)
        .map(|j| {
            let mean = sum_mean[j] / r;
            let second = sum_second[j] / r;
            let mut variance = second - mean * mean;
            if variance < 0.0 {
                clamped += 1;
                if variance < -NEGATIVE_TOLERANCE * second.abs().max(f64::MIN_POSITIVE) {
                    negative_warnings += 1;
                }
                variance = 0.0;
            }
            PredictiveMoments { mean, variance }
        })
        .collect();
    Ok(BatchPrediction {
        moments,
        clamped,
        negative_warnings,
    })
}

/// Predictive mean and variance at a single test input.
pub fn predict_point(x_star: &[f64], model: &Model, pcfg: &PredictConfig) -> Result<PredictiveMoments> {
    ensure_dim("input", model.cfg.dim, x_star.len())?;
    let xs = DMatrix::from_row_slice(1, x_star.len(), x_star);
    Ok(predict_batch(&xs, model, pcfg)?.moments[0])
}

fn check_pairs(n_pred: usize, targets: &[f64]) -> Result<()> {
    ensure_dim("targets", n_pred, targets.len())?;
    if targets.is_empty() {
        return Err(Error::contract("metrics need at least one test point"));
    }
    Ok(())
}

/// `sqrt(mean((y - mu)^2))`.
pub fn rmse(means: &[f64], targets: &[f64]) -> Result<f64> {
    check_pairs(means.len(), targets)?;
    let sse: f64 = means.iter().zip(targets).map(|(m, y)| (y - m).powi(2)).sum();
    Ok((sse / targets.len() as f64).sqrt())
}

/// `0.5 mean((y - mu)^2 / var + log(2 pi var))`.
pub fn mnlp(predictions: &[PredictiveMoments], targets: &[f64]) -> Result<f64> {
    check_pairs(predictions.len(), targets)?;
    let mut total = 0.0;
    for (p, y) in predictions.iter().zip(targets) {
        if !(p.variance > 0.0) {
            return Err(Error::contract(format!("predictive variance {} is not positive", p.variance)));
        }
        total += (y - p.mean).powi(2) / p.variance + (2.0 * std::f64::consts::PI * p.variance).ln();
    }
    Ok(0.5 * total / targets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mnlp: f64,
    pub n_test: usize,
    /// Points whose variance was zero and was replaced by `1e-12 * var(targets)`.
    pub zero_variance_substituted: usize,
}

/// RMSE and MNLP. `extra_variance` is added to every predictive variance
/// before the MNLP (the noise variance when scoring noisy targets).
pub fn evaluate(predictions: &[PredictiveMoments], targets: &[f64], extra_variance: f64) -> Result<Metrics> {
    check_pairs(predictions.len(), targets)?;
    let n = targets.len() as f64;
    let mean_y = targets.iter().sum::<f64>() / n;
    let var_y = targets.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / n;
    let floor = if var_y > 0.0 { 1e-12 * var_y } else { 1e-12 };
    let mut substituted = 0;
    let adjusted: Vec<PredictiveMoments> = predictions
        .iter()
        .map(|p| {
            let mut variance = p.variance + extra_variance;
            if !(variance > 0.0) {
                substituted += 1;
                variance = floor;
            }
            PredictiveMoments { mean: p.mean, variance }
        })
        .collect();
    let means: Vec<f64> = predictions.iter().map(|p| p.mean).collect();
    Ok(Metrics {
        rmse: rmse(&means, targets)?,
        mnlp: mnlp(&adjusted, targets)?,
        n_test: targets.len(),
        zero_variance_substituted: substituted,
    })
}
