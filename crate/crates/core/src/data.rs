//! CSV ingestion, standardization, train/test splitting and synthetic data.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::{feature_matrix, FrequencyBlock, SpectralConfig};

/// Inputs `n x d` and targets, with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Rows dropped at ingestion because of missing or non-finite values.
    pub rejected_rows: usize,
}

impl Dataset {
    pub fn new(xs: DMatrix<f64>, ys: DVector<f64>) -> Result<Self> {
        ensure_dim("targets", xs.nrows(), ys.len())?;
        let feature_names = (0..xs.ncols()).map(|i| format!("x{i}")).collect();
        Ok(Dataset {
            xs,
            ys,
            feature_names,
            target_name: "y".into(),
            rejected_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.ncols()
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            xs: DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.xs[(idx[r], c)]),
            ys: DVector::from_fn(idx.len(), |r, _| self.ys[idx[r]]),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            rejected_rows: 0,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "N/A" | "null" | "NULL")
}

/// Read a headed CSV; `target_column` names the response and every other
/// column is a feature. Rows with a missing or non-finite cell are dropped and
/// counted.
pub fn load_csv(path: &Path, target_column: &str) -> Result<Dataset> {
    let (headers, rows, rejected) = read_table(path)?;
    let target = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn(target_column.to_owned()))?;
    let features: Vec<usize> = (0..headers.len()).filter(|&c| c != target).collect();
    Ok(assemble(&headers, &rows, &features, Some(target), rejected))
}

/// Read the named feature columns (in the given order) and optionally a
/// target; without a target `ys` is all zeros.
pub fn load_columns(path: &Path, features: &[String], target_column: Option<&str>) -> Result<Dataset> {
    let (headers, rows, rejected) = read_table(path)?;
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let cols = features.iter().map(|f| find(f)).collect::<Result<Vec<_>>>()?;
    let target = target_column.map(find).transpose()?;
    Ok(assemble(&headers, &rows, &cols, target, rejected))
}

fn assemble(headers: &[String], rows: &[Vec<f64>], features: &[usize], target: Option<usize>, rejected: usize) -> Dataset {
    let n = rows.len();
    Dataset {
        xs: DMatrix::from_fn(n, features.len(), |r, c| rows[r][features[c]]),
        ys: DVector::from_fn(n, |r, _| target.map_or(0.0, |t| rows[r][t])),
        feature_names: features.iter().map(|&c| headers[c].clone()).collect(),
        target_name: target.map_or_else(String::new, |t| headers[t].clone()),
        rejected_rows: rejected,
    }
}

/// Header plus the numeric rows that have no missing or non-finite cell.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>, usize)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let width = headers.len();
    let mut rows = Vec::new();
    let mut rejected = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() != width {
            return Err(Error::Data(format!(
                "row {} has {} fields, header has {width}",
                r + 1,
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(width);
        let mut bad = false;
        for (c, cell) in record.iter().enumerate() {
            if is_missing(cell) {
                bad = true;
                row.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row: r + 1,
                column: headers[c].clone(),
                value: cell.to_owned(),
            })?;
            bad |= !v.is_finite();
            row.push(v);
        }
        if bad {
            rejected += 1;
        } else {
            rows.push(row);
        }
    }
    if rows.is_empty() && rejected == 0 {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok((headers, rows, rejected))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Write a headed CSV with the features first and the target last.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    w.write_record(&header).map_err(csv_err(path))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.xs.row(i).iter().map(|v| v.to_string()).collect();
        row.push(data.ys[i].to_string());
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Per-column affine maps to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    /// Columns with zero spread; their scale is left at 1.
    pub x_constant: Vec<bool>,
    pub y_mean: f64,
    pub y_sd: f64,
}

fn mean_sd<'a>(it: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = it.clone().count() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = it.clone().sum::<f64>() / n;
    let var = it.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            x_mean: vec![0.0; dim],
            x_sd: vec![1.0; dim],
            x_constant: vec![false; dim],
            y_mean: 0.0,
            y_sd: 1.0,
        }
    }

    /// Fit on `data` (callers pass the training portion only).
    pub fn fit(data: &Dataset) -> Self {
        let d = data.dim();
        let mut x_mean = Vec::with_capacity(d);
        let mut x_sd = Vec::with_capacity(d);
        let mut x_constant = Vec::with_capacity(d);
        for c in 0..d {
            let (m, s) = mean_sd(data.xs.column(c).iter());
            x_mean.push(m);
            let constant = !(s > 0.0 && s.is_finite());
            x_constant.push(constant);
            x_sd.push(if constant { 1.0 } else { s });
        }
        let (y_mean, s) = mean_sd(data.ys.iter());
        Standardization {
            x_mean,
            x_sd,
            x_constant,
            y_mean,
            y_sd: if s > 0.0 && s.is_finite() { s } else { 1.0 },
        }
    }

    pub fn transform_x(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dim("input columns", self.x_mean.len(), xs.ncols())?;
        Ok(DMatrix::from_fn(xs.nrows(), xs.ncols(), |r, c| (xs[(r, c)] - self.x_mean[c]) / self.x_sd[c]))
    }

    pub fn transform_y(&self, ys: &DVector<f64>) -> DVector<f64> {
        ys.map(|y| (y - self.y_mean) / self.y_sd)
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            xs: self.transform_x(&data.xs)?,
            ys: self.transform_y(&data.ys),
            ..data.clone()
        })
    }

    pub fn invert_mean(&self, m: f64) -> f64 {
        m * self.y_sd + self.y_mean
    }

    pub fn invert_variance(&self, v: f64) -> f64 {
        v * self.y_sd * self.y_sd
    }
}

/// Seeded shuffle split; returns `(train, test, train_idx, test_idx)`.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset, Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction {train_fraction} outside (0, 1]")));
    }
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(n.min(1), n);
    let test_idx = idx.split_off(n_train);
    Ok((data.select(&idx), data.select(&test_idx), idx, test_idx))
}

/// Parameters of the sparse spectrum generative model used for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub m_true: usize,
    /// Noise standard deviation.
    pub noise: f64,
    pub seed: u64,
    /// Lengthscale of the squared exponential kernel whose spectrum the true
    /// frequencies are drawn from.
    pub lengthscale: f64,
    pub signal_variance: f64,
}

impl SynthSpec {
    pub fn new(n: usize, d: usize, m_true: usize, noise: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            d,
            m_true,
            noise,
            seed,
            lengthscale: 0.2,
            signal_variance: 1.0,
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub theta: Vec<f64>,
    pub s: Vec<f64>,
}

impl SynthTruth {
    pub fn config(&self) -> Result<SpectralConfig> {
        let noise_variance = (self.spec.noise * self.spec.noise).max(f64::MIN_POSITIVE);
        SpectralConfig::new(self.spec.d, self.spec.m_true, self.spec.signal_variance, noise_variance)
    }

    /// Noise-free function value at each row of `xs`.
    pub fn latent(&self, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let cfg = self.config()?;
        let phi = feature_matrix(xs, &FrequencyBlock::from_slice(&self.theta)?, &cfg)?;
        Ok(phi.transpose() * DVector::from_column_slice(&self.s))
    }
}

/// Draw `X ~ U[0,1]^d`, `theta ~ N(0, Theta)`, `s ~ N(0, Lambda)` and
/// `y = Phi' s + eps`.
pub fn synth_ssgp_with(spec: &SynthSpec) -> Result<(Dataset, SynthTruth)> {
    if spec.n == 0 || spec.d == 0 || spec.m_true == 0 {
        return Err(Error::contract("synthetic data needs n, d, m >= 1"));
    }
    if !(spec.noise >= 0.0 && spec.lengthscale > 0.0 && spec.signal_variance > 0.0) {
        return Err(Error::contract("synthetic noise, lengthscale and signal variance must be valid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let freq_sd = 1.0 / (2.0 * PI * spec.lengthscale);
    let amp_sd = (spec.signal_variance / spec.m_true as f64).sqrt();
    let theta: Vec<f64> = (0..spec.m_true * spec.d)
        .map(|_| freq_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let s: Vec<f64> = (0..2 * spec.m_true).map(|_| amp_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let xs = DMatrix::from_fn(spec.n, spec.d, |_, _| rng.random::<f64>());
    let truth = SynthTruth { spec: *spec, theta, s };
    let mut ys = truth.latent(&xs)?;
    for y in ys.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *y += spec.noise * e;
    }
    Ok((Dataset::new(xs, ys)?, truth))
}

/// Synthetic data with the default lengthscale (0.2) and unit signal variance.
pub fn synth_ssgp(n: usize, d: usize, m_true: usize, noise: f64, seed: u64) -> Result<(Dataset, SynthTruth)> {
    synth_ssgp_with(&SynthSpec::new(n, d, m_true, noise, seed))
}
