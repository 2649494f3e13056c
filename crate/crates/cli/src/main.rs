//! Command-line front end: each subcommand reads and writes the artifacts
//! named in the run configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mscred::autodiff::{check_gradients, GradCheckConfig};
use mscred::config::RunConfig;
use mscred::detect::{anchor_records, DetectionResult};
use mscred::eval::{metrics_csv, noise_sweep, plot_csv, sweep_csv};
use mscred::io::{read_bytes, read_string, to_json_lines, write_atomic};
use mscred::model::{
    load_checkpoint, loss_and_grads, save_checkpoint, sequence_loss, AblationMode, ModelParams,
};
use mscred::pipeline::{self, Prepared};
use mscred::signature::{read_cache, write_cache, Standardizer};
use mscred::timeseries::{load_csv, write_csv, AnomalyLabel, CsvSchema, MultivariateSeries};
use mscred::{Error, Exec};

const THREADS_ENV: &str = "MSCRED_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "mscred",
    version,
    about = "Multi-scale signature-matrix anomaly detection"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; overrides the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration: toy or paper-synthetic.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// Directory that relative artifact paths are resolved against.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Global seed; per-stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (also read from MSCRED_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More progress output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic series and inject labeled anomalies.
    Generate {
        /// Noise factor of the generator.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Standardize the series and cache every signature tensor.
    BuildSignatures,
    /// Train the network and write a checkpoint and training log.
    Train(TrainArgs),
    /// Calibrate thresholds on the validation split and detect on the test split.
    Detect(DetectArgs),
    /// Print root causes and severity of every detected event.
    Diagnose {
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Score detections against the labels.
    Eval,
    /// Regenerate, retrain and evaluate for several noise factors.
    NoiseSweep {
        /// Comma-separated noise factors.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare reverse-mode gradients with central differences.
    GradCheck {
        /// Sequence length used for the check.
        #[arg(long, default_value_t = 2)]
        history: usize,
        /// Entries sampled per parameter array.
        #[arg(long, default_value_t = 24)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// full, no_attention, convlstm_last2 or convlstm_last1.
    #[arg(long)]
    mode: Option<AblationMode>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    gap_merge: Option<usize>,
    /// Include full residual matrices in residuals.jsonl.
    #[arg(long)]
    keep_residuals: bool,
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numeric() { 3 } else { 2 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn data_error(message: String) -> Failure {
    Failure { code: 2, message }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.global.quiet {
        log::LevelFilter::Error
    } else {
        match cli.global.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_target(false)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_config(g: &Global) -> CliResult<RunConfig> {
    let mut run = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&g.preset)?,
    };
    if let Some(seed) = g.seed {
        run.apply_seed(seed);
    }
    let env_threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok());
    if let Some(t) = g.threads.or(env_threads) {
        run.threads = t;
    }
    run.paths = run.paths.rooted(&g.out);
    Ok(run)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut run = resolve_config(&cli.global)?;
    let exec = if cli.global.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    if run.threads > 0 {
        mscred::exec::init_threads(run.threads);
    }
    match cli.command {
        Command::Generate { lambda } => {
            if let Some(l) = lambda {
                run.synth.lambda = l;
            }
            generate(&run)
        }
        Command::BuildSignatures => build_signatures(&run, exec),
        Command::Train(args) => {
            if let Some(v) = args.epochs {
                run.train.epochs = v;
            }
            if let Some(v) = args.batch_size {
                run.train.batch_size = v;
            }
            if let Some(v) = args.lr {
                run.train.adam.lr = v;
            }
            if let Some(v) = args.mode {
                run.model.mode = v;
            }
            train(&run, exec)
        }
        Command::Detect(args) => {
            if let Some(v) = args.beta {
                run.detect.beta = v;
            }
            if let Some(v) = args.quantile {
                run.detect.quantile = v;
            }
            if let Some(v) = args.gap_merge {
                run.detect.gap_merge = v;
            }
            run.detect.keep_residuals |= args.keep_residuals;
            detect(&run, exec)
        }
        Command::Diagnose { top_k } => {
            if let Some(k) = top_k {
                run.detect.top_k = k;
            }
            diagnose(&run)
        }
        Command::Eval => eval(&run),
        Command::NoiseSweep { lambdas, epochs } => {
            if let Some(l) = lambdas {
                run.eval.lambdas = l;
            }
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            sweep(&run, exec)
        }
        Command::GradCheck {
            history,
            samples,
            tolerance,
        } => {
            run.model.h = history;
            grad_check(&run, samples, tolerance)
        }
        Command::Config => {
            print!("{}", run.to_toml());
            Ok(())
        }
    }
}

fn generate(run: &RunConfig) -> CliResult<()> {
    let (series, labels) = pipeline::generate(run)?;
    write_csv(&series, &run.paths.data, CsvSchema::default())?;
    write_json(&run.paths.labels, &labels)?;
    info!(
        "wrote {} series x {} steps to {} and {} labels to {}",
        series.n(),
        series.len(),
        run.paths.data.display(),
        labels.len(),
        run.paths.labels.display()
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| data_error(e.to_string()))?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> CliResult<T> {
    if !path.exists() {
        return Err(data_error(format!("{} not found; {hint}", path.display())));
    }
    let text = read_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| data_error(format!("{}: line {}: {e}", path.display(), e.line())))
}

fn load_series(run: &RunConfig) -> CliResult<(MultivariateSeries, String)> {
    let path = &run.paths.data;
    if !path.exists() {
        return Err(data_error(format!(
            "no data at {}; run `mscred generate` first",
            path.display()
        )));
    }
    let digest = hex(&Sha256::digest(read_bytes(path)?));
    let series = load_csv(path, CsvSchema::default())?;
    if series.n() != run.model.n {
        return Err(data_error(format!(
            "{} has {} series but the model expects n={}",
            path.display(),
            series.n(),
            run.model.n
        )));
    }
    Ok((series, digest))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sidecar that ties a signature cache to the data and statistics it was built from.
#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct CacheMeta {
    data_sha256: String,
    standardizer: Standardizer,
}

fn cache_meta_path(cache: &Path) -> PathBuf {
    let mut p = cache.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn build_signatures(run: &RunConfig, exec: Exec) -> CliResult<()> {
    let (series, digest) = load_series(run)?;
    let prepared = pipeline::prepare(run, &series, exec)?;
    write_cache(&run.paths.cache, &prepared.bank)?;
    write_json(
        &cache_meta_path(&run.paths.cache),
        &CacheMeta {
            data_sha256: digest,
            standardizer: prepared.standardizer.clone(),
        },
    )?;
    info!(
        "cached {} signature tensors to {}",
        prepared.bank.steps().count(),
        run.paths.cache.display()
    );
    Ok(())
}

/// Standardized data and signatures, from the cache when it matches.
fn prepared(
    run: &RunConfig,
    standardizer: Option<Standardizer>,
    exec: Exec,
) -> CliResult<Prepared> {
    let (series, digest) = load_series(run)?;
    let standardizer =
        standardizer.unwrap_or_else(|| Standardizer::fit(&series, run.splits.train_range()));
    let meta_path = cache_meta_path(&run.paths.cache);
    if run.paths.cache.exists() && meta_path.exists() {
        let meta: CacheMeta = read_json(&meta_path, "")?;
        let (header, bank) = read_cache(&run.paths.cache)?;
        let same_layout = header.scales == run.model.scales
            && header.h == run.model.h
            && header.g == run.model.gap;
        if meta.data_sha256 == digest && meta.standardizer == standardizer && same_layout {
            let anchors = pipeline::Anchors::new(run)?;
            if anchors.all().iter().all(|&t| bank.sequence(t).is_ok()) {
                info!("using signature cache {}", run.paths.cache.display());
                let series = standardizer.apply(&series)?;
                return Ok(Prepared {
                    standardizer,
                    series,
                    anchors,
                    bank,
                });
            }
        }
        warn!("signature cache does not match the data or config; rebuilding in memory");
    }
    Ok(pipeline::prepare_with(run, &series, standardizer, exec)?)
}

fn train(run: &RunConfig, exec: Exec) -> CliResult<()> {
    run.validate()?;
    let prepared = prepared(run, None, exec)?;
    info!(
        "training on {} sequences, validating on {}",
        prepared.anchors.train.len(),
        prepared.anchors.valid.len()
    );
    let (params, log) = pipeline::train(run, &prepared, exec, |e| {
        info!(
            "epoch {:>3}  train {:.5}  valid {:.5}  {:.1}s",
            e.epoch, e.train_loss, e.valid_loss, e.wall_seconds
        )
    })?;
    save_checkpoint(&run.paths.checkpoint, &params)?;
    write_atomic(
        &run.paths.reports.join("train_log.csv"),
        log.to_csv().as_bytes(),
    )?;
    info!(
        "kept epoch {}; checkpoint {} (sha256 {})",
        log.best_epoch,
        run.paths.checkpoint.display(),
        params.checksum()
    );
    Ok(())
}

fn load_model(run: &RunConfig) -> CliResult<ModelParams> {
    let path = &run.paths.checkpoint;
    if !path.exists() {
        return Err(data_error(format!(
            "no checkpoint at {}; run `mscred train` first",
            path.display()
        )));
    }
    Ok(load_checkpoint(path, Some(&run.model))?)
}

fn detection_path(run: &RunConfig) -> PathBuf {
    run.paths.reports.join("detection.json")
}

fn detect(run: &RunConfig, exec: Exec) -> CliResult<()> {
    run.validate()?;
    let params = load_model(run)?;
    let prepared = prepared(run, Some(params.standardizer.clone()), exec)?;
    let (result, residuals) = pipeline::detect(run, &params, &prepared, exec)?;
    let reports = &run.paths.reports;
    let records = anchor_records(&result, &residuals, run.detect.keep_residuals);
    write_atomic(&reports.join("residuals.jsonl"), &to_json_lines(&records)?)?;
    write_atomic(
        &reports.join("events.jsonl"),
        &to_json_lines(&result.events)?,
    )?;
    write_json(&detection_path(run), &result)?;
    info!(
        "theta {:?}, tau {:?}; {} events over {} test anchors",
        result.calibration.theta,
        result.calibration.tau,
        result.events.len(),
        result.anchors.len()
    );
    Ok(())
}

fn load_detection(run: &RunConfig) -> CliResult<DetectionResult> {
    read_json(&detection_path(run), "run `mscred detect` first")
}

#[derive(Serialize)]
struct Diagnosis<'a> {
    start: usize,
    end: usize,
    peak_anchor: usize,
    severity: mscred::detect::Severity,
    consistent: bool,
    channels: &'a [bool],
    root_causes: &'a [mscred::detect::RankedSeries],
}

fn diagnose(run: &RunConfig) -> CliResult<()> {
    let result = load_detection(run)?;
    let k = run.detect.top_k;
    let mut out = Vec::with_capacity(result.events.len());
    for e in &result.events {
        let top = &e.root_causes[..k.min(e.root_causes.len())];
        let names: Vec<String> = top
            .iter()
            .map(|r| format!("{}({})", r.name, r.score))
            .collect();
        println!(
            "event {}..{}  severity {:?}{}  peak {}  root causes {}",
            e.start,
            e.end,
            e.severity,
            if e.consistent {
                ""
            } else {
                " (inconsistent channels)"
            },
            e.peak_anchor,
            names.join(", ")
        );
        out.push(Diagnosis {
            start: e.start,
            end: e.end,
            peak_anchor: e.peak_anchor,
            severity: e.severity,
            consistent: e.consistent,
            channels: &e.channels,
            root_causes: top,
        });
    }
    write_atomic(
        &run.paths.reports.join("diagnosis.jsonl"),
        &to_json_lines(&out)?,
    )?;
    Ok(())
}

fn eval(run: &RunConfig) -> CliResult<()> {
    let result = load_detection(run)?;
    let labels: Vec<AnomalyLabel> = read_json(&run.paths.labels, "run `mscred generate` first")?;
    let report = pipeline::eval(run, &result, &labels);
    let reports = &run.paths.reports;
    let rows = [
        ("channel_s".to_owned(), report.metrics),
        ("combined".to_owned(), report.combined),
    ];
    write_atomic(&reports.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    write_json(&reports.join("eval.json"), &report)?;
    write_atomic(&reports.join("scores.csv"), plot_csv(&result).as_bytes())?;
    let m = report.metrics;
    println!(
        "precision {:.2}  recall {:.2}  f1 {:.2}  (tp {} fp {} fn {})  recall@{} {:.2}",
        m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_, report.k, report.recall_at_k
    );
    Ok(())
}

fn sweep(run: &RunConfig, exec: Exec) -> CliResult<()> {
    if run.eval.lambdas.is_empty() {
        return Err(data_error("noise sweep needs at least one lambda".into()));
    }
    run.validate()?;
    let reports = run.paths.reports.clone();
    let rows = noise_sweep(&run.eval.lambdas, |lambda| {
        info!("lambda {lambda}");
        let mut cfg = run.clone();
        cfg.synth.lambda = lambda;
        let outcome = pipeline::run_end_to_end(&cfg, exec, |_| {})?;
        write_atomic(
            &reports.join(format!("sweep_scores_lambda_{lambda}.csv")),
            plot_csv(&outcome.detection).as_bytes(),
        )?;
        Ok(outcome.report.metrics)
    });
    for r in &rows {
        if let Some(e) = &r.error {
            warn!("lambda {} failed: {e}", r.lambda);
        }
    }
    write_atomic(
        &reports.join("noise_sweep.csv"),
        sweep_csv(&rows).as_bytes(),
    )?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn grad_check(run: &RunConfig, samples: usize, tolerance: f64) -> CliResult<()> {
    run.validate()?;
    let (series, _) = pipeline::generate(run)?;
    let standardizer = Standardizer::fit(&series, run.splits.train_range());
    let series = standardizer.apply(&series)?;
    let m = &run.model;
    let anchors =
        mscred::signature::anchor_schedule(run.splits.train_range(), &m.scales, m.h, m.gap)?;
    let anchor = *anchors
        .first()
        .ok_or_else(|| data_error("training split has no anchors".into()))?;
    let bank = mscred::signature::SignatureBank::build(
        &series,
        &[anchor],
        &m.scales,
        m.h,
        m.gap,
        Exec::Sequential,
    )?;
    let seq = bank.sequence(anchor)?;
    let params = ModelParams::init(m, run.train.seed)?;
    let (_, grads) = loss_and_grads(&params, &seq)?;
    let cfg = GradCheckConfig {
        samples_per_array: samples,
        seed: run.seed,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(
        params.values(),
        &grads,
        |vals: &[Arc<mscred::autodiff::Array>]| {
            sequence_loss(&params.with_values(vals.to_vec()), &seq)
        },
        &cfg,
    )?;
    let worst = &params.names()[report.worst.0];
    let pass = report.max_rel_err < tolerance;
    println!(
        "grad-check {}: max relative error {:.3e} over {} entries, {} refined at a kink (worst {worst}[{}]: analytic {:.6e}, numeric {:.6e})",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.checked,
        report.refined,
        report.worst.1,
        report.worst_analytic,
        report.worst_numeric
    );
    if pass {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!(
                "gradient check failed: {:.3e} >= {tolerance:e}",
                report.max_rel_err
            ),
        })
    }
}
