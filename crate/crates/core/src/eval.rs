//! Event-level precision/recall/F1, root-cause recall@k, severity confusion
//! and the noise sweep.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::{DetectionResult, Severity, Span};
use crate::error::Result;
use crate::timeseries::AnomalyLabel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Round half away from zero to two decimals, as reported in tables.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl Metrics {
    /// Precision is 0 without predictions and recall is 0 without labels.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| {
            if a + b == 0 {
                0.0
            } else {
                a as f64 / (a + b) as f64
            }
        };
        let precision = ratio(tp, fp);
        let recall = ratio(tp, fn_);
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp,
            fp,
            fn_,
        }
    }

    /// Metrics known only by their published precision and recall.
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            ..Self::default()
        }
    }
}

/// Label span `[start, end)` widened by `tolerance` on both sides, as inclusive anchor bounds.
fn widened(label: &AnomalyLabel, tolerance: usize) -> Span {
    Span {
        start: label.start.saturating_sub(tolerance),
        end: (label.end() + tolerance).saturating_sub(1),
    }
}

/// Maximum matching between predictions and labels; a pair is admissible when
/// the prediction overlaps the widened label span. Returns (prediction, label) pairs.
pub fn match_events(
    predicted: &[Span],
    labels: &[AnomalyLabel],
    tolerance: usize,
) -> Vec<(usize, usize)> {
    let adj: Vec<Vec<usize>> = labels
        .iter()
        .map(|l| {
            let w = widened(l, tolerance);
            (0..predicted.len())
                .filter(|&p| predicted[p].overlaps(&w))
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; predicted.len()];

    fn augment(
        l: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &p in &adj[l] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if owner[p].is_none_or(|o| augment(o, adj, seen, owner)) {
                owner[p] = Some(l);
                return true;
            }
        }
        false
    }

    for l in 0..labels.len() {
        let mut seen = vec![false; predicted.len()];
        augment(l, &adj, &mut seen, &mut owner);
    }
    let mut pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(p, o)| o.map(|l| (p, l)))
        .collect();
    pairs.sort_unstable();
    pairs
}

pub fn event_metrics(predicted: &[Span], labels: &[AnomalyLabel], tolerance: usize) -> Metrics {
    let tp = match_events(predicted, labels, tolerance).len();
    Metrics::from_counts(tp, predicted.len() - tp, labels.len() - tp)
}

/// Mean over events of |top-k ∩ truth| / |truth|; 0 for no events.
pub fn recall_at_k(rankings: &[Vec<usize>], truths: &[Vec<usize>], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    let per: Vec<f64> = rankings
        .iter()
        .zip(truths)
        .filter(|(_, t)| !t.is_empty())
        .map(|(r, t)| r.iter().take(k).filter(|s| t.contains(s)).count() as f64 / t.len() as f64)
        .collect();
    if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    }
}

/// Severity class of a labeled duration: its rank among the distinct durations in `pool`.
pub fn duration_class(duration: usize, pool: &[usize]) -> Severity {
    let mut pool = pool.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let rank = pool.iter().filter(|&&d| d < duration).count();
    match rank {
        0 => Severity::Short,
        r if r + 1 >= pool.len() => Severity::Long,
        _ => Severity::Medium,
    }
}

/// Per labeled anomaly: which channels have an event overlapping it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDetection {
    pub label: AnomalyLabel,
    pub channels: Vec<bool>,
}

pub fn label_detections(
    result: &DetectionResult,
    labels: &[AnomalyLabel],
    tolerance: usize,
) -> Vec<LabelDetection> {
    labels
        .iter()
        .map(|l| {
            let w = widened(l, tolerance);
            LabelDetection {
                label: l.clone(),
                channels: result
                    .channel_events
                    .iter()
                    .map(|ev| ev.iter().any(|e| e.overlaps(&w)))
                    .collect(),
            }
        })
        .collect()
}

/// Counts of (true class, predicted class) over matched events; `None` is a missed label.
pub fn severity_confusion(
    result: &DetectionResult,
    labels: &[AnomalyLabel],
    pool: &[usize],
    tolerance: usize,
) -> BTreeMap<(Severity, Option<Severity>), usize> {
    let spans: Vec<Span> = result.events.iter().map(|e| e.span()).collect();
    let pairs = match_events(&spans, labels, tolerance);
    let mut out = BTreeMap::new();
    for (li, label) in labels.iter().enumerate() {
        let predicted = pairs
            .iter()
            .find(|p| p.1 == li)
            .map(|p| result.events[p.0].severity);
        *out.entry((duration_class(label.duration, pool), predicted))
            .or_insert(0) += 1;
    }
    out
}

/// Full evaluation of one detection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Events of the smallest-scale channel against the labels.
    pub metrics: Metrics,
    /// Cross-channel merged events against the labels.
    pub combined: Metrics,
    pub recall_at_k: f64,
    pub k: usize,
    pub rca_events: usize,
    pub labels: Vec<LabelDetection>,
    pub severity: Vec<(Severity, Option<Severity>, usize)>,
}

pub fn evaluate(
    result: &DetectionResult,
    labels: &[AnomalyLabel],
    pool: &[usize],
    tolerance: usize,
    k: usize,
) -> EvalReport {
    let metrics = event_metrics(&result.channel_events[0], labels, tolerance);
    let spans: Vec<Span> = result.events.iter().map(|e| e.span()).collect();
    let combined = event_metrics(&spans, labels, tolerance);
    let pairs = match_events(&spans, labels, tolerance);
    let rankings: Vec<Vec<usize>> = pairs
        .iter()
        .map(|&(p, _)| result.events[p].top_k(k))
        .collect();
    let truths: Vec<Vec<usize>> = pairs
        .iter()
        .map(|&(_, l)| labels[l].root_causes.clone())
        .collect();
    EvalReport {
        metrics,
        combined,
        recall_at_k: recall_at_k(&rankings, &truths, k),
        k,
        rca_events: pairs.len(),
        labels: label_detections(result, labels, tolerance),
        severity: severity_confusion(result, labels, pool, tolerance)
            .into_iter()
            .map(|((t, p), c)| (t, p, c))
            .collect(),
    }
}

pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("name,precision,recall,f1,tp,fp,fn\n");
    for (name, m) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
        ));
    }
    out
}

/// `channel,anchor,score,tau` rows for plotting score traces.
pub fn plot_csv(result: &DetectionResult) -> String {
    let mut out = String::from("channel,anchor,score,tau\n");
    for (c, &tau) in result.calibration.tau.iter().enumerate() {
        for (anchor, s) in result.anchors.iter().zip(&result.scores) {
            out.push_str(&format!("{c},{anchor},{},{tau}\n", s[c]));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub metrics: Option<Metrics>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

/// Run `point` for every lambda; a failing point is recorded and the sweep continues.
pub fn noise_sweep(
    lambdas: &[f64],
    mut point: impl FnMut(f64) -> Result<Metrics>,
) -> Vec<SweepRow> {
    lambdas
        .iter()
        .map(|&lambda| {
            let start = Instant::now();
            let res = point(lambda);
            let wall_seconds = start.elapsed().as_secs_f64();
            match res {
                Ok(m) => SweepRow {
                    lambda,
                    metrics: Some(m),
                    wall_seconds,
                    error: None,
                },
                Err(e) => SweepRow {
                    lambda,
                    metrics: None,
                    wall_seconds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Columns `lambda,precision,recall,f1,wall_seconds`; failed points have empty metric fields.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,precision,recall,f1,wall_seconds\n");
    for r in rows {
        match &r.metrics {
            Some(m) => out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.lambda, m.precision, m.recall, m.f1, r.wall_seconds
            )),
            None => out.push_str(&format!("{},,,,{}\n", r.lambda, r.wall_seconds)),
        }
    }
    out
}
