//! End-to-end composition: generate, standardize, build signatures, train,
//! detect and evaluate.

use crate::autodiff::Array;
use crate::config::RunConfig;
use crate::detect::{self, Calibration, DetectionResult};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, Metrics};
use crate::exec::Exec;
use crate::model::{fit_from, EpochLog, ModelParams, TrainLog};
use crate::rng::derive_seed;
use crate::signature::{anchor_schedule, SignatureBank, Standardizer};
use crate::timeseries::{generate_synthetic, inject_anomalies, AnomalyLabel, MultivariateSeries};

/// Synthetic series with injected anomalies and their labels.
pub fn generate(run: &RunConfig) -> Result<(MultivariateSeries, Vec<AnomalyLabel>)> {
    run.validate()?;
    let clean = generate_synthetic(&run.synth)?;
    inject_anomalies(&clean, &run.inject)
}

/// Anchor schedules of the three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Anchors {
    pub fn new(run: &RunConfig) -> Result<Self> {
        let m = &run.model;
        let sched = |r| anchor_schedule(r, &m.scales, m.h, m.gap);
        Ok(Self {
            train: sched(run.splits.train_range())?,
            valid: sched(run.splits.valid_range())?,
            test: sched(run.splits.test_range())?,
        })
    }

    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Standardized data and its signature tensors.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub standardizer: Standardizer,
    pub series: MultivariateSeries,
    pub anchors: Anchors,
    pub bank: SignatureBank,
}

/// Standardize with train-split statistics and build every needed signature tensor.
pub fn prepare(run: &RunConfig, raw: &MultivariateSeries, exec: Exec) -> Result<Prepared> {
    let standardizer = Standardizer::fit(raw, run.splits.train_range());
    prepare_with(run, raw, standardizer, exec)
}

/// Like [`prepare`] but with statistics fixed in advance, e.g. from a checkpoint.
pub fn prepare_with(
    run: &RunConfig,
    raw: &MultivariateSeries,
    standardizer: Standardizer,
    exec: Exec,
) -> Result<Prepared> {
    run.splits.validate(raw.len())?;
    let series = standardizer.apply(raw)?;
    let anchors = Anchors::new(run)?;
    let m = &run.model;
    let bank = SignatureBank::build(&series, &anchors.all(), &m.scales, m.h, m.gap, exec)?;
    Ok(Prepared {
        standardizer,
        series,
        anchors,
        bank,
    })
}

pub fn train(
    run: &RunConfig,
    prepared: &Prepared,
    exec: Exec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParams, TrainLog)> {
    let mut params = ModelParams::init(&run.model, derive_seed(run.train.seed, 0))?;
    params.standardizer = prepared.standardizer.clone();
    fit_from(
        params,
        &prepared.bank,
        &prepared.anchors.train,
        &prepared.anchors.valid,
        &run.train,
        exec,
        on_epoch,
    )
}

/// Calibrate on the validation split and detect on the test split.
/// Also returns the test residual tensors, aligned with `prepared.anchors.test`.
pub fn detect(
    run: &RunConfig,
    params: &ModelParams,
    prepared: &Prepared,
    exec: Exec,
) -> Result<(DetectionResult, Vec<Array>)> {
    let valid = detect::residuals(params, &prepared.bank, &prepared.anchors.valid, exec)?;
    let calibration = Calibration::fit(&valid, &run.detect)?;
    let test = detect::residuals(params, &prepared.bank, &prepared.anchors.test, exec)?;
    let result = detect::detect(
        &prepared.anchors.test,
        &test,
        &calibration,
        prepared.series.names(),
        &run.detect,
    )?;
    Ok((result, test))
}

pub fn eval(run: &RunConfig, result: &DetectionResult, labels: &[AnomalyLabel]) -> EvalReport {
    evaluate(
        result,
        labels,
        &run.inject.durations,
        run.tolerance(),
        run.eval.k,
    )
}

/// Everything one end-to-end run produces.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub labels: Vec<AnomalyLabel>,
    pub params: ModelParams,
    pub log: TrainLog,
    pub detection: DetectionResult,
    pub report: EvalReport,
}

pub fn run_end_to_end(
    run: &RunConfig,
    exec: Exec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Outcome> {
    let (raw, labels) = generate(run)?;
    let prepared = prepare(run, &raw, exec)?;
    let (params, log) = train(run, &prepared, exec, on_epoch)?;
    let (detection, _) = detect(run, &params, &prepared, exec)?;
    let report = eval(run, &detection, &labels);
    Ok(Outcome {
        labels,
        params,
        log,
        detection,
        report,
    })
}

/// Channel-S metrics of a fresh end-to-end run at noise level `lambda`.
pub fn sweep_point(run: &RunConfig, lambda: f64, exec: Exec) -> Result<Metrics> {
    let mut cfg = run.clone();
    cfg.synth.lambda = lambda;
    Ok(run_end_to_end(&cfg, exec, |_| {})?.report.metrics)
}
