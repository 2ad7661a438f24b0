//! End-to-end pipeline (standardize, partition, train, predict) and the
//! versioned JSON model and checkpoint files.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, Standardization};
use crate::error::{ensure_dim, Error, Result};
use crate::features::SpectralConfig;
use crate::optimizer::{train_from, ModelGradient, TrainTrace, TrainingState};
use crate::partition::{kmeans_partition_with, Block, KMeansOptions, KMeansReport, PartitionedDataset};
use crate::predict::{evaluate, predict_batch, BatchPrediction, Metrics, Model, PredictConfig};
use crate::variational::{PriorSpec, VariationalState};

pub const MODEL_VERSION: u32 = 1;

const KMEANS_SALT: u64 = 0x6b6d_6561_6e73;
const INIT_SALT: u64 = 0x696e_6974;

/// Standardized training data partitioned into blocks, plus the prior and
/// spectral config derived from it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub standardization: Standardization,
    pub partition: PartitionedDataset,
    pub kmeans: KMeansReport,
    pub cfg: SpectralConfig,
    pub prior: PriorSpec,
}

pub fn prepare(train: &Dataset, run: &RunConfig) -> Result<Prepared> {
    run.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let standardization = if run.standardize {
        Standardization::fit(train)
    } else {
        Standardization::identity(train.dim())
    };
    let std_train = standardization.apply(train)?;
    let cfg = SpectralConfig::new(train.dim(), run.n_freq, run.signal_variance, run.noise_variance)
        .map_err(|e| Error::Config(e.to_string()))?;
    let prior = PriorSpec::from_inputs(&std_train.xs, &cfg)?;
    let opts = KMeansOptions {
        p: run.partitions,
        seed: run.seed ^ KMEANS_SALT,
        max_iters: run.kmeans_iters,
        balance: run.balance_partitions,
    };
    let (partition, kmeans) = kmeans_partition_with(&std_train.xs, &std_train.ys, &opts)
        .map_err(|e| Error::Config(format!("partitioning: {e}")))?;
    Ok(Prepared {
        standardization,
        partition,
        kmeans,
        cfg,
        prior,
    })
}

/// A model ready to predict in the units of the original data.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub run: RunConfig,
    pub model: Model,
    pub standardization: Standardization,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl TrainedModel {
    /// The untrained model at the configured initial state.
    pub fn initial(train: &Dataset, run: &RunConfig) -> Result<Self> {
        let prep = prepare(train, run)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ INIT_SALT);
        let state = VariationalState::initial(&prep.prior, &prep.cfg, &mut rng)?;
        Ok(TrainedModel {
            run: *run,
            model: Model::new(state, prep.prior, prep.cfg, prep.partition)?,
            standardization: prep.standardization,
            feature_names: train.feature_names.clone(),
            target_name: train.target_name.clone(),
        })
    }

    /// Predictive moments of the latent function in raw target units.
    pub fn predict(&self, xs: &DMatrix<f64>, pcfg: &PredictConfig) -> Result<BatchPrediction> {
        let std_x = self.standardization.transform_x(xs)?;
        let mut out = predict_batch(&std_x, &self.model, pcfg)?;
        for m in &mut out.moments {
            m.mean = self.standardization.invert_mean(m.mean);
            m.variance = self.standardization.invert_variance(m.variance);
        }
        Ok(out)
    }

    /// Noise variance in raw target units.
    pub fn observation_variance(&self) -> f64 {
        self.standardization.invert_variance(self.model.cfg.noise_variance)
    }

    /// RMSE and MNLP on `data` in raw units.
    pub fn evaluate(&self, data: &Dataset, pcfg: &PredictConfig) -> Result<Metrics> {
        let preds = self.predict(&data.xs, pcfg)?;
        let extra = if self.run.mnlp_observed { self.observation_variance() } else { 0.0 };
        evaluate(&preds.moments, data.ys.as_slice(), extra)
    }

    pub fn to_file(&self) -> ModelFile {
        let (m, b) = (self.model.state.m(), self.model.state.b());
        let part = &self.model.partition;
        let n = part.total_n();
        let d = part.dim();
        let mut train_x = vec![vec![0.0; d]; n];
        let mut train_y = vec![0.0; n];
        for blk in part.blocks() {
            for (r, &i) in blk.indices.iter().enumerate() {
                train_x[i] = blk.xs.row(r).iter().copied().collect();
                train_y[i] = blk.ys[r];
            }
        }
        ModelFile {
            version: MODEL_VERSION,
            run: self.run,
            cfg: self.model.cfg,
            prior: self.model.prior.clone(),
            standardization: self.standardization.clone(),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            m: m.as_slice().to_vec(),
            b: b.as_slice().to_vec(),
            centroids: part.centroids().row_iter().map(|r| r.iter().copied().collect()).collect(),
            blocks: part.blocks().iter().map(|blk| blk.indices.clone()).collect(),
            train_x,
            train_y,
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let cfg = file.cfg;
        cfg.validate().map_err(model_err)?;
        let dim = cfg.alpha_dim();
        ensure_dim("model b", dim, file.b.len()).map_err(model_err)?;
        ensure_dim("model M", dim * dim, file.m.len()).map_err(model_err)?;
        let state = VariationalState::new(DMatrix::from_column_slice(dim, dim, &file.m), DVector::from_vec(file.b))?;
        let n = file.train_y.len();
        ensure_dim("training rows", n, file.train_x.len()).map_err(model_err)?;
        if file.train_x.iter().any(|r| r.len() != cfg.dim) || file.centroids.iter().any(|r| r.len() != cfg.dim) {
            return Err(Error::Model("training inputs or centroids have the wrong width".into()));
        }
        let mut blocks = Vec::with_capacity(file.blocks.len());
        for idx in &file.blocks {
            if idx.iter().any(|&i| i >= n) {
                return Err(Error::Model("block index out of range".into()));
            }
            blocks.push(Block {
                xs: DMatrix::from_fn(idx.len(), cfg.dim, |r, c| file.train_x[idx[r]][c]),
                ys: DVector::from_fn(idx.len(), |r, _| file.train_y[idx[r]]),
                indices: idx.clone(),
            });
        }
        let centroids = DMatrix::from_fn(file.centroids.len(), cfg.dim, |r, c| file.centroids[r][c]);
        let partition = PartitionedDataset::from_parts(blocks, centroids).map_err(model_err)?;
        if partition.total_n() != n {
            return Err(Error::Model("blocks do not cover the training data".into()));
        }
        Ok(TrainedModel {
            run: file.run,
            model: Model::new(state, file.prior, cfg, partition).map_err(model_err)?,
            standardization: file.standardization,
            feature_names: file.feature_names,
            target_name: file.target_name,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(read_versioned(path)?)
    }
}

fn model_err(e: Error) -> Error {
    Error::Model(e.to_string())
}

/// On-disk model. `m` is column-major; `train_x`/`train_y` are the
/// standardized training data the local predictors condition on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub run: RunConfig,
    pub cfg: SpectralConfig,
    pub prior: PriorSpec,
    pub standardization: Standardization,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub m: Vec<f64>,
    pub b: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
    pub blocks: Vec<Vec<usize>>,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
}

/// A model plus what training needs to continue bit-identically. The sample
/// streams are keyed by `(train.seed, iteration)`, so the iteration counter
/// is the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelFile,
    pub next_iteration: usize,
    pub accumulator: Vec<f64>,
    pub trace: TrainTrace,
}

impl Checkpoint {
    pub fn capture(model: &TrainedModel, training: &TrainingState) -> Self {
        let mut tm = model.clone();
        tm.model.state = training.state.clone();
        tm.model.cfg = training.cfg;
        tm.model.prior = training.prior.clone();
        Checkpoint {
            version: MODEL_VERSION,
            model: tm.to_file(),
            next_iteration: training.next_iteration,
            accumulator: training.accumulator.clone(),
            trace: training.trace.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_versioned(path)
    }
}

/// Train from the initial state. `on_checkpoint` receives a checkpoint every
/// `run.train.checkpoint_every` iterations.
pub fn fit(
    train: &Dataset,
    run: &RunConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(TrainedModel, TrainTrace)> {
    let init = TrainedModel::initial(train, run)?;
    let start = TrainingState::start(init.model.state.clone(), init.model.prior.clone(), init.model.cfg)?;
    continue_training(init, start, on_checkpoint)
}

/// Continue an interrupted run up to the iteration count stored in its config.
pub fn resume(
    checkpoint: Checkpoint,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(TrainedModel, TrainTrace)> {
    let model = TrainedModel::from_file(checkpoint.model)?;
    let mut start = TrainingState::start(model.model.state.clone(), model.model.prior.clone(), model.model.cfg)?;
    start.next_iteration = checkpoint.next_iteration;
    start.accumulator = checkpoint.accumulator;
    start.trace = checkpoint.trace;
    continue_training(model, start, on_checkpoint)
}

fn continue_training(
    mut model: TrainedModel,
    start: TrainingState,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(TrainedModel, TrainTrace)> {
    let tcfg = model.run.train;
    let snapshot = model.clone();
    let done = train_from(&model.model.partition, start, &tcfg, &ModelGradient, &mut |ts| {
        on_checkpoint(&Checkpoint::capture(&snapshot, ts))
    })?;
    model.model.state = done.state;
    model.model.cfg = done.cfg;
    model.model.prior = done.prior;
    Ok((model, done.trace))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Model(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_versioned<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(source) => {
            return Err(Error::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    parse_versioned(&text)
}

/// Check the `version` field before interpreting anything else.
pub fn parse_versioned<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Model(format!("unreadable model file: {e}")))?;
    let found = value.get("version").and_then(|v| v.as_u64());
    if found != Some(MODEL_VERSION as u64) {
        return Err(Error::VersionMismatch {
            found: found.map_or(0, |v| v.min(u32::MAX as u64) as u32),
            expected: MODEL_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Model(e.to_string()))
}
