//! The declarative run configuration: one JSON document with a `version` field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientSamplePlan;
use crate::optimizer::{StepSchedule, TrainConfig};
use crate::predict::PredictConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Number of spectral frequencies `m`. The input dimension comes from the data.
    pub n_freq: usize,
    /// In standardized target units when `standardize` is on.
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    /// Number of k-means blocks `p`.
    pub partitions: usize,
    pub kmeans_iters: usize,
    pub balance_partitions: bool,
    pub split_fraction: f64,
    /// Seeds the split, the k-means seeding and the initial state.
    pub seed: u64,
    pub standardize: bool,
    /// Add the noise variance to the predictive variance before computing MNLP.
    pub mnlp_observed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            n_freq: 10,
            signal_variance: 1.0,
            noise_variance: 0.1,
            train: TrainConfig {
                plan: GradientSamplePlan::default(),
                step_schedule: StepSchedule {
                    base_step: 0.1,
                    decay_power: 0.7,
                    adaptive: true,
                },
                ..TrainConfig::default()
            },
            predict: PredictConfig::default(),
            partitions: 20,
            kmeans_iters: 100,
            balance_partitions: false,
            split_fraction: 0.95,
            seed: 0,
            standardize: true,
            mnlp_observed: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid json: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => return Err(Error::Config(format!("version {v} is not supported (expected {CONFIG_VERSION})"))),
            None => return Err(Error::Config("missing integer field \"version\"".into())),
        }
        let mut merged = serde_json::to_value(RunConfig::default()).expect("config serializes");
        merge(&mut merged, value);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("version {} is not supported", self.version));
        }
        if self.n_freq == 0 {
            return bad("n_freq must be at least 1".into());
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return bad("signal_variance must be positive".into());
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return bad("noise_variance must be positive".into());
        }
        if self.partitions == 0 {
            return bad("partitions must be at least 1".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return bad(format!("split_fraction {} outside (0, 1]", self.split_fraction));
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.predict.validate().map_err(|e| Error::Config(format!("predict: {e}")))?;
        Ok(())
    }
}

/// Overlay `patch` onto `base`, recursing into objects so that a partially
/// specified section keeps the run defaults for its other keys.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
