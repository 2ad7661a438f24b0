use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use svbssgp::config::RunConfig;
use svbssgp::data::{load_columns, load_csv, save_csv, split, synth_ssgp_with, Dataset, SynthSpec};
use svbssgp::gradcheck::gradcheck;
use svbssgp::model::{fit, prepare, resume, Checkpoint, TrainedModel};
use svbssgp::optimizer::TrainTrace;
use svbssgp::predict::PredictConfig;
use svbssgp::{Error, Result};

#[derive(Parser)]
#[command(name = "svbssgp", version, about = "Stochastic variational sparse spectrum GP regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, standardize, partition and train; writes a model file.
    Train(TrainArgs),
    /// Predictive mean and variance for every row of a CSV.
    Predict(PredictArgs),
    /// RMSE and MNLP of a model on a labelled CSV, printed as JSON.
    Evaluate(EvaluateArgs),
    /// Finite-difference checks of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Write a dataset drawn from the sparse spectrum generative model.
    Synth(SynthArgs),
    /// Block sizes of the k-means partition of a dataset.
    PartitionInfo(PartitionInfoArgs),
}

#[derive(Args)]
struct Overrides {
    /// JSON run configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_freq: Option<usize>,
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    base_step: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    signal_variance: Option<f64>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            run.seed = v;
            run.train.seed = v;
            run.predict.seed = v;
        }
        if let Some(v) = self.iterations {
            run.train.iterations = v;
        }
        if let Some(v) = self.n_freq {
            run.n_freq = v;
        }
        if let Some(v) = self.partitions {
            run.partitions = v;
        }
        if let Some(v) = self.split_fraction {
            run.split_fraction = v;
        }
        if let Some(v) = self.base_step {
            run.train.step_schedule.base_step = v;
        }
        if let Some(v) = self.noise_variance {
            run.noise_variance = v;
        }
        if let Some(v) = self.signal_variance {
            run.signal_variance = v;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    target: Option<String>,
    #[arg(long)]
    model: PathBuf,
    /// Per-iteration telemetry CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the held-out rows here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Checkpoint file, rewritten every `train.checkpoint_every` iterations.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting afresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PredictOpts {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    predict_seed: Option<u64>,
}

impl PredictOpts {
    fn apply(&self, mut p: PredictConfig) -> Result<PredictConfig> {
        if let Some(v) = self.samples {
            p.n_samples = v;
        }
        if let Some(v) = self.gamma {
            p.gamma_mix = v;
        }
        if let Some(v) = self.predict_seed {
            p.seed = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    opts: PredictOpts,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the target column the model was trained on.
    #[arg(long)]
    target: Option<String>,
    /// Add the noise variance to predictive variances before scoring MNLP.
    #[arg(long)]
    mnlp_observed: Option<bool>,
    #[command(flatten)]
    opts: PredictOpts,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    output: PathBuf,
    /// Ground-truth frequencies and amplitudes as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionInfoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::PartitionInfo(a) => partition_info(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut save_checkpoint = |c: &Checkpoint| match &a.checkpoint {
        Some(p) => c.save(p),
        None => Ok(()),
    };
    let (model, trace, summary) = if let Some(ck) = &a.resume {
        let (model, trace) = resume(Checkpoint::load(ck)?, &mut save_checkpoint)?;
        (model, trace, json!({ "resumed_from": ck }))
    } else {
        let run = a.overrides.resolve()?;
        let (Some(path), Some(target)) = (&a.data, &a.target) else {
            return Err(Error::Config("train needs --data and --target".into()));
        };
        let data = load_csv(path, target)?;
        let (train, test, _, _) = split(&data, run.split_fraction, run.seed)?;
        if let Some(p) = &a.test_out {
            save_csv(p, &test)?;
        }
        let (model, trace) = fit(&train, &run, &mut save_checkpoint)?;
        let (initial, metrics) = if test.is_empty() {
            (None, None)
        } else {
            let start = TrainedModel::initial(&train, &run)?;
            (Some(start.evaluate(&test, &run.predict)?), Some(model.evaluate(&test, &run.predict)?))
        };
        let summary = json!({
            "n_train": train.len(),
            "n_test": test.len(),
            "rejected_rows": data.rejected_rows,
            "initial_test_metrics": initial,
            "test_metrics": metrics,
        });
        (model, trace, summary)
    };
    model.save(&a.model)?;
    if let Some(p) = &a.trace {
        write_trace(p, &trace)?;
    }
    let last = trace.records.last();
    let mut summary = summary;
    summary["iterations"] = json!(trace.records.len());
    summary["final_gradient_norm"] = json!(last.map(|r| r.gradient_norm));
    summary["halvings"] = json!(trace.records.iter().map(|r| r.halvings).sum::<usize>());
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn write_trace(path: &Path, trace: &TrainTrace) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "iter",
        "step_size",
        "gradient_norm",
        "elbo",
        "wall_clock_ms",
        "halvings",
        "noise_variance",
        "signal_variance",
    ])
    .map_err(io)?;
    for r in &trace.records {
        w.write_record([
            r.iter.to_string(),
            r.step_size.to_string(),
            r.gradient_norm.to_string(),
            r.elbo.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_clock_ms.to_string(),
            r.halvings.to_string(),
            r.noise_variance.to_string(),
            r.signal_variance.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let model = TrainedModel::load(&a.model)?;
    let pcfg = a.opts.apply(model.run.predict)?;
    let data = load_columns(&a.data, &model.feature_names, None)?;
    let preds = model.predict(&data.xs, &pcfg)?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", a.output.display()));
    let mut w = csv::Writer::from_path(&a.output).map_err(io)?;
    let mut header = model.feature_names.clone();
    header.extend(["mean".to_owned(), "variance".to_owned()]);
    w.write_record(&header).map_err(io)?;
    for (i, m) in preds.moments.iter().enumerate() {
        let mut row: Vec<String> = data.xs.row(i).iter().map(|v| v.to_string()).collect();
        row.push(m.mean.to_string());
        row.push(m.variance.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: a.output.clone(),
        source,
    })?;
    if data.rejected_rows > 0 || preds.negative_warnings > 0 {
        eprintln!(
            "warning: {} rows rejected, {} variances clamped from below round-off",
            data.rejected_rows, preds.negative_warnings
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let mut model = TrainedModel::load(&a.model)?;
    if let Some(v) = a.mnlp_observed {
        model.run.mnlp_observed = v;
    }
    let pcfg = a.opts.apply(model.run.predict)?;
    let target = a.target.clone().unwrap_or_else(|| model.target_name.clone());
    let data: Dataset = load_columns(&a.data, &model.feature_names, Some(&target))?;
    if data.is_empty() {
        return Err(Error::Data("no usable rows to evaluate".into()));
    }
    let m = model.evaluate(&data, &pcfg)?;
    println!("{}", json!({ "rmse": m.rmse, "mnlp": m.mnlp, "n_test": m.n_test }));
    if m.zero_variance_substituted > 0 {
        eprintln!("warning: {} zero variances replaced before scoring mnlp", m.zero_variance_substituted);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report = gradcheck(a.instances, a.seed, a.tolerance)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed (partition {:e}, kl {:e}, tolerance {:e})",
            report.max_rel_err_partition, report.max_rel_err_kl, report.tolerance
        )))
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec = SynthSpec::new(a.n, a.d, a.m, a.noise, a.seed);
    if let Some(l) = a.lengthscale {
        spec.lengthscale = l;
    }
    let (data, truth) = synth_ssgp_with(&spec)?;
    save_csv(&a.output, &data)?;
    if let Some(p) = &a.truth {
        write_file(p, &serde_json::to_string_pretty(&truth).expect("truth serializes"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn partition_info(a: PartitionInfoArgs) -> Result<ExitCode> {
    let run = a.overrides.resolve()?;
    let data = load_csv(&a.data, &a.target)?;
    let prep = prepare(&data, &run)?;
    let sizes = prep.partition.block_sizes();
    let lo = *sizes.iter().min().unwrap_or(&0);
    let hi = *sizes.iter().max().unwrap_or(&0);
    let bins = a.bins.max(1);
    let width = ((hi - lo) / bins + 1).max(1);
    let mut counts = vec![0usize; bins];
    for &s in &sizes {
        counts[((s - lo) / width).min(bins - 1)] += 1;
    }
    let histogram: Vec<_> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| json!({ "from": lo + i * width, "to": lo + (i + 1) * width - 1, "blocks": c }))
        .collect();
    println!(
        "{}",
        json!({
            "p": sizes.len(),
            "n": prep.partition.total_n(),
            "min": lo,
            "max": hi,
            "kmeans_iterations": prep.kmeans.iterations,
            "converged": prep.kmeans.converged,
            "histogram": histogram,
        })
    );
    Ok(ExitCode::SUCCESS)
}
