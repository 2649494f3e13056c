//! Residual signature matrices, broken-cell scores, thresholds, events,
//! root-cause rankings and severity labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward, ModelParams};
use crate::signature::SignatureBank;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// Quantile of validation residuals used as the cell threshold theta.
    pub quantile: f64,
    /// tau = beta * max validation score.
    pub beta: f64,
    /// Unflagged anchors tolerated inside one event.
    pub gap_merge: usize,
    pub top_k: usize,
    /// Write full residual matrices into the per-anchor report.
    pub keep_residuals: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            quantile: 0.995,
            beta: 1.0,
            gap_merge: 1,
            top_k: 3,
            keep_residuals: false,
        }
    }
}

/// Elementwise `|target - reconstruction|`.
pub fn residual(target: &Array, reconstruction: &Array) -> Result<Array> {
    target.check_same_shape(reconstruction, "residual")?;
    Ok(target.zip_map(reconstruction, |a, b| (a - b).abs()))
}

/// Residual tensors for each anchor, in order.
pub fn residuals(
    params: &ModelParams,
    bank: &SignatureBank,
    anchors: &[usize],
    exec: Exec,
) -> Result<Vec<Array>> {
    let out = exec.map(anchors, |&t| {
        let seq = bank.sequence(t)?;
        let rec = forward(params, &seq)?.reconstruction;
        if !rec.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite reconstruction at anchor {t}"
            )));
        }
        residual(seq.last().expect("h >= 1"), &rec)
    });
    out.into_iter().collect()
}

/// Channel `c` of an n x n x s tensor as a row-major n x n matrix.
pub fn channel(r: &Array, c: usize) -> Vec<f64> {
    let s = r.shape()[2];
    r.data().iter().skip(c).step_by(s).copied().collect()
}

/// Number of cells strictly above `theta`.
pub fn broken_score(r: &[f64], theta: f64) -> usize {
    r.iter().filter(|&&v| v > theta).count()
}

/// Broken-cell count in row `i` or column `i`, each cell counted once.
pub fn series_counts(r: &[f64], n: usize, theta: f64) -> Vec<usize> {
    let mut counts = vec![0; n];
    for i in 0..n {
        for j in 0..n {
            if r[i * n + j] > theta {
                counts[i] += 1;
                if i != j {
                    counts[j] += 1;
                }
            }
        }
    }
    counts
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &mut [f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Calibration("no values to take a quantile of".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!(
            "quantile must be in [0, 1], got {q}"
        )));
    }
    values.sort_unstable_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(values[lo] + (values[hi] - values[lo]) * (pos - lo as f64))
}

/// Per-channel theta: the `q` quantile of every validation residual cell of that channel.
pub fn calibrate_theta(valid: &[Array], q: f64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!(
            "quantile must be in (0, 1), got {q}"
        )));
    }
    let first = valid
        .first()
        .ok_or_else(|| Error::Calibration("validation split produced no residuals".into()))?;
    let s = first.shape()[2];
    (0..s)
        .map(|c| {
            let mut all: Vec<f64> = valid.iter().flat_map(|r| channel(r, c)).collect();
            quantile(&mut all, q)
        })
        .collect()
}

pub fn calibrate_tau(valid_scores: &[usize], beta: f64) -> Result<f64> {
    if !(1.0..=2.0).contains(&beta) {
        return Err(Error::Config(format!("beta must be in [1, 2], got {beta}")));
    }
    let max = valid_scores
        .iter()
        .max()
        .ok_or_else(|| Error::Calibration("no validation scores".into()))?;
    Ok(beta * *max as f64)
}

/// The beta grid {1.0, 1.05, ..., 2.0}.
pub fn beta_grid() -> Vec<f64> {
    (0..=20).map(|k| 1.0 + 0.05 * k as f64).collect()
}

/// Beta maximizing `f1(beta)` over [`beta_grid`]; ties keep the smallest beta.
pub fn grid_search_beta(mut f1: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best = (1.0, f64::NEG_INFINITY);
    for beta in beta_grid() {
        let f = f1(beta)?;
        if f > best.1 {
            best = (beta, f);
        }
    }
    Ok(best)
}

/// Inclusive anchor span of flagged anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Flag anchors with score above `tau` and merge runs separated by at most
/// `gap_merge` unflagged anchors.
pub fn detect_events(anchors: &[usize], scores: &[usize], tau: f64, gap_merge: usize) -> Vec<Span> {
    let mut events = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (start index, last flagged index)
    for (k, &s) in scores.iter().enumerate() {
        if (s as f64) <= tau {
            continue;
        }
        open = match open {
            Some((start, last)) if k - last - 1 <= gap_merge => Some((start, k)),
            Some((start, last)) => {
                events.push(Span {
                    start: anchors[start],
                    end: anchors[last],
                });
                Some((k, k))
            }
            None => Some((k, k)),
        };
    }
    if let Some((start, last)) = open {
        events.push(Span {
            start: anchors[start],
            end: anchors[last],
        });
    }
    events
}

/// Series ranked by broken cells in their row/column; ties go to the lower index.
pub fn root_cause_ranking(r: &[f64], n: usize, theta: f64) -> Vec<(usize, usize)> {
    let counts = series_counts(r, n, theta);
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Short,
    Medium,
    Long,
}

impl Severity {
    fn of_channel(c: usize, channels: usize) -> Self {
        if c == 0 {
            Severity::Short
        } else if c + 1 >= channels {
            Severity::Long
        } else {
            Severity::Medium
        }
    }
}

/// Severity from the set of detecting channels, smallest scale first.
/// Returns the label and whether the set was one of the expected nested sets.
pub fn severity(detected: &[bool]) -> Option<(Severity, bool)> {
    let largest = detected.iter().rposition(|&d| d)?;
    let nested = detected[..=largest].iter().all(|&d| d);
    Some((Severity::of_channel(largest, detected.len()), nested))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSeries {
    pub series: usize,
    pub name: String,
    pub score: usize,
}

/// One detected event across channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: usize,
    pub end: usize,
    /// Detection flag per channel, smallest scale first.
    pub channels: Vec<bool>,
    pub peak_anchor: usize,
    pub peak_score: usize,
    pub severity: Severity,
    pub consistent: bool,
    pub root_causes: Vec<RankedSeries>,
}

impl Event {
    pub fn span(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
        }
    }

    pub fn top_k(&self, k: usize) -> Vec<usize> {
        self.root_causes.iter().take(k).map(|r| r.series).collect()
    }
}

/// Thresholds derived from the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub quantile: f64,
    pub theta: Vec<f64>,
    pub valid_max: Vec<usize>,
    pub beta: f64,
    pub tau: Vec<f64>,
}

impl Calibration {
    pub fn fit(valid: &[Array], cfg: &DetectConfig) -> Result<Self> {
        let theta = calibrate_theta(valid, cfg.quantile)?;
        let scores = score_matrix(valid, &theta);
        let valid_max: Vec<usize> = (0..theta.len())
            .map(|c| scores.iter().map(|s| s[c]).max().unwrap_or(0))
            .collect();
        let mut cal = Self {
            quantile: cfg.quantile,
            theta,
            valid_max,
            beta: cfg.beta,
            tau: Vec::new(),
        };
        cal.set_beta(cfg.beta)?;
        Ok(cal)
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        self.tau = self
            .valid_max
            .iter()
            .map(|&m| calibrate_tau(&[m], beta))
            .collect::<Result<_>>()?;
        self.beta = beta;
        Ok(())
    }
}

/// `scores[anchor][channel]`.
pub fn score_matrix(residuals: &[Array], theta: &[f64]) -> Vec<Vec<usize>> {
    residuals
        .iter()
        .map(|r| {
            theta
                .iter()
                .enumerate()
                .map(|(c, &th)| broken_score(&channel(r, c), th))
                .collect()
        })
        .collect()
}

/// One line of the per-anchor report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub anchor: usize,
    pub scores: Vec<usize>,
    /// `series_counts[channel][series]`.
    pub series_counts: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<Vec<f64>>,
}

/// Everything `detect` produces for a test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub calibration: Calibration,
    pub gap_merge: usize,
    pub anchors: Vec<usize>,
    /// `scores[anchor][channel]`.
    pub scores: Vec<Vec<usize>>,
    /// Events flagged in each channel separately.
    pub channel_events: Vec<Vec<Span>>,
    /// Channel events merged across channels where they overlap.
    pub events: Vec<Event>,
}

impl DetectionResult {
    /// Scores of one channel, aligned with `anchors`.
    pub fn channel_scores(&self, c: usize) -> Vec<usize> {
        self.scores.iter().map(|s| s[c]).collect()
    }
}

/// Score, flag and explain every test anchor.
pub fn detect(
    anchors: &[usize],
    residuals: &[Array],
    calibration: &Calibration,
    names: &[String],
    cfg: &DetectConfig,
) -> Result<DetectionResult> {
    if anchors.len() != residuals.len() {
        return Err(Error::Shape(format!(
            "{} anchors but {} residual tensors",
            anchors.len(),
            residuals.len()
        )));
    }
    let s = calibration.theta.len();
    let scores = score_matrix(residuals, &calibration.theta);
    let channel_events: Vec<Vec<Span>> = (0..s)
        .map(|c| {
            let sc: Vec<usize> = scores.iter().map(|v| v[c]).collect();
            detect_events(anchors, &sc, calibration.tau[c], cfg.gap_merge)
        })
        .collect();

    // union of overlapping channel spans
    let mut tagged: Vec<(Span, usize)> = channel_events
        .iter()
        .enumerate()
        .flat_map(|(c, ev)| ev.iter().map(move |&sp| (sp, c)))
        .collect();
    tagged.sort_by_key(|(sp, c)| (sp.start, sp.end, *c));
    let mut merged: Vec<(Span, BTreeSet<usize>)> = Vec::new();
    for (sp, c) in tagged {
        match merged.last_mut() {
            Some((m, set)) if sp.start <= m.end => {
                m.end = m.end.max(sp.end);
                set.insert(c);
            }
            _ => merged.push((sp, BTreeSet::from([c]))),
        }
    }

    let n = names.len();
    let mut events = Vec::with_capacity(merged.len());
    for (span, set) in merged {
        let lo = anchors.partition_point(|&a| a < span.start);
        let hi = anchors.partition_point(|&a| a <= span.end);
        let mut peak = lo;
        for k in lo..hi {
            if scores[k][0] > scores[peak][0] {
                peak = k;
            }
        }
        let r = channel(&residuals[peak], 0);
        if r.len() != n * n {
            return Err(Error::Shape(format!(
                "{} series names for a {}-cell matrix",
                n,
                r.len()
            )));
        }
        let root_causes = root_cause_ranking(&r, n, calibration.theta[0])
            .into_iter()
            .map(|(i, score)| RankedSeries {
                series: i,
                name: names[i].clone(),
                score,
            })
            .collect();
        let detected: Vec<bool> = (0..s).map(|c| set.contains(&c)).collect();
        let (severity, consistent) = severity(&detected).expect("at least one channel");
        events.push(Event {
            start: span.start,
            end: span.end,
            channels: detected,
            peak_anchor: anchors[peak],
            peak_score: scores[peak][0],
            severity,
            consistent,
            root_causes,
        });
    }
    Ok(DetectionResult {
        calibration: calibration.clone(),
        gap_merge: cfg.gap_merge,
        anchors: anchors.to_vec(),
        scores,
        channel_events,
        events,
    })
}

/// Per-anchor report lines.
pub fn anchor_records(
    result: &DetectionResult,
    residuals: &[Array],
    keep_residuals: bool,
) -> Vec<AnchorRecord> {
    result
        .anchors
        .iter()
        .zip(residuals)
        .zip(&result.scores)
        .map(|((&anchor, r), scores)| {
            let n = r.shape()[0];
            AnchorRecord {
                anchor,
                scores: scores.clone(),
                series_counts: result
                    .calibration
                    .theta
                    .iter()
                    .enumerate()
                    .map(|(c, &th)| series_counts(&channel(r, c), n, th))
                    .collect(),
                residual: keep_residuals.then(|| r.data().to_vec()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    #[test]
    fn broken_score_cases() {
        assert_eq!(broken_score(&[0.0; 25], 0.1), 0);
        let mut r = vec![0.0; 25];
        for k in [0, 3, 7, 24] {
            r[k] = 1.0;
        }
        assert_eq!(broken_score(&r, 0.5), 4);
    }

    #[test]
    fn broken_score_monotone_in_theta() {
        let mut rng = seeded(1);
        for _ in 0..20 {
            let r: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
            let scores: Vec<usize> = (0..=20)
                .map(|k| broken_score(&r, k as f64 * 0.05))
                .collect();
            assert!(scores.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn quantile_cases() {
        let mut v = vec![3.5; 40];
        assert_eq!(quantile(&mut v, 0.995).unwrap(), 3.5);
        let mut v: Vec<f64> = (1..=1000).rev().map(f64::from).collect();
        let q = quantile(&mut v, 0.995).unwrap();
        assert_relative_eq!(q, 995.005, epsilon = 1e-9);
        assert!(matches!(quantile(&mut [], 0.5), Err(Error::Calibration(_))));
    }

    #[test]
    fn theta_requires_validation() {
        assert!(matches!(
            calibrate_theta(&[], 0.995),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn theta_self_consistency() {
        // continuous residuals: the calibrated theta breaks about (1 - q) of all cells
        let n = 30;
        let mut rng = seeded(4);
        let valid: Vec<Array> = (0..200)
            .map(|_| Array::from_fn(&[n, n, 3], |_| rng.gen::<f64>().powi(2)))
            .collect();
        let q = 0.995;
        let theta = calibrate_theta(&valid, q).unwrap();
        let scores = score_matrix(&valid, &theta);
        for c in 0..3 {
            let mean = scores.iter().map(|s| s[c] as f64).sum::<f64>() / scores.len() as f64;
            let want = (1.0 - q) * (n * n) as f64;
            assert!(
                (mean - want).abs() <= 0.5 * want,
                "channel {c}: {mean} vs {want}"
            );
        }
    }

    #[test]
    fn tau_cases() {
        assert_relative_eq!(calibrate_tau(&[1, 2, 3], 1.5).unwrap(), 4.5);
        let valid = [4, 9, 2];
        let tau = calibrate_tau(&valid, 1.0).unwrap();
        assert_eq!(tau, 9.0);
        let anchors = [10, 20, 30];
        assert!(detect_events(&anchors, &valid, tau, 1).is_empty());
        assert!(calibrate_tau(&valid, 2.5).is_err());
        assert!(matches!(
            calibrate_tau(&[], 1.0),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn grid_search_matches_exhaustive() {
        let f = |b: f64| -(b - 1.37).abs();
        let (beta, _) = grid_search_beta(|b| Ok(f(b))).unwrap();
        let best = beta_grid()
            .into_iter()
            .max_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        assert_relative_eq!(beta, best);
        assert_relative_eq!(beta, 1.35, epsilon = 1e-12);
    }

    #[test]
    fn event_merging() {
        let anchors: Vec<usize> = (0..20).map(|k| 100 + 10 * k).collect();
        assert!(detect_events(&anchors, &[0; 20], 0.0, 1).is_empty());
        let mut s = vec![0; 20];
        for k in 0..3 {
            s[k] = 5;
        }
        assert_eq!(
            detect_events(&anchors, &s, 1.0, 1),
            [Span {
                start: 100,
                end: 120
            }]
        );
        s[4] = 5;
        assert_eq!(
            detect_events(&anchors, &s, 1.0, 1),
            [Span {
                start: 100,
                end: 140
            }]
        );
        s[7] = 5;
        assert_eq!(
            detect_events(&anchors, &s, 1.0, 1),
            [
                Span {
                    start: 100,
                    end: 140
                },
                Span {
                    start: 170,
                    end: 170
                }
            ]
        );
        assert_eq!(detect_events(&anchors, &s, 1.0, 0).len(), 3);
    }

    proptest! {
        #[test]
        fn events_partition_flags(flags in prop::collection::vec(any::<bool>(), 1..60), gap in 0usize..4) {
            let anchors: Vec<usize> = (0..flags.len()).map(|k| 10 * k).collect();
            let scores: Vec<usize> = flags.iter().map(|&f| if f { 3 } else { 0 }).collect();
            let events = detect_events(&anchors, &scores, 1.0, gap);
            for (k, &f) in flags.iter().enumerate() {
                let inside = events.iter().filter(|e| e.start <= anchors[k] && anchors[k] <= e.end).count();
                if f {
                    prop_assert_eq!(inside, 1);
                }
                prop_assert!(inside <= 1);
            }
            for e in &events {
                prop_assert!(flags[e.start / 10] && flags[e.end / 10]);
                let mut run = 0;
                for k in e.start / 10..=e.end / 10 {
                    run = if flags[k] { 0 } else { run + 1 };
                    prop_assert!(run <= gap);
                }
            }
            for w in events.windows(2) {
                let unflagged = w[1].start / 10 - w[0].end / 10 - 1;
                prop_assert!(unflagged > gap);
            }
            // values below tau do not matter
            let noisy: Vec<usize> = flags.iter().enumerate().map(|(k, &f)| if f { 3 } else { k % 2 }).collect();
            prop_assert_eq!(detect_events(&anchors, &noisy, 1.0, gap), events);
        }
    }

    #[test]
    fn root_cause_cases() {
        let n = 10;
        let mut r = vec![0.0; n * n];
        r[2 * n + 5] = 1.0;
        let ranked = root_cause_ranking(&r, n, 0.5);
        assert_eq!(ranked[0], (2, 1));
        assert_eq!(ranked[1], (5, 1));
        assert!(ranked[2..].iter().all(|&(_, s)| s == 0));

        let mut r = vec![0.0; n * n];
        for k in 0..n {
            r[7 * n + k] = 1.0;
            r[k * n + 7] = 1.0;
        }
        let ranked = root_cause_ranking(&r, n, 0.5);
        assert_eq!(ranked[0], (7, 2 * n - 1));
    }

    #[test]
    fn root_cause_matches_recount() {
        let n = 12;
        let mut rng = seeded(9);
        for _ in 0..20 {
            let r: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
            let theta = 0.8;
            let ranked = root_cause_ranking(&r, n, theta);
            let mut seen = vec![false; n];
            for &(i, score) in &ranked {
                seen[i] = true;
                let naive = (0..n)
                    .flat_map(|a| (0..n).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a == i || b == i) && r[a * n + b] > theta)
                    .count();
                assert_eq!(score, naive);
            }
            assert!(seen.iter().all(|&s| s));
            let off: usize = (0..n * n)
                .filter(|&k| k / n != k % n && r[k] > theta)
                .count();
            let diag: usize = (0..n).filter(|&k| r[k * n + k] > theta).count();
            assert_eq!(ranked.iter().map(|x| x.1).sum::<usize>(), 2 * off + diag);
        }
    }

    #[test]
    fn severity_rules() {
        assert_eq!(severity(&[true, true, true]), Some((Severity::Long, true)));
        assert_eq!(
            severity(&[true, false, false]),
            Some((Severity::Short, true))
        );
        assert_eq!(
            severity(&[true, true, false]),
            Some((Severity::Medium, true))
        );
        assert_eq!(
            severity(&[false, false, true]),
            Some((Severity::Long, false))
        );
        assert_eq!(
            severity(&[false, true, false]),
            Some((Severity::Medium, false))
        );
        assert_eq!(severity(&[false, false, false]), None);
    }

    fn planted(n: usize, hot: &[(usize, usize)], value: f64) -> Array {
        let mut a = Array::zeros(&[n, n, 3]);
        for &(i, j) in hot {
            for c in 0..3 {
                a.data_mut()[(i * n + j) * 3 + c] = value;
            }
        }
        a
    }

    #[test]
    fn detect_end_to_end_on_planted_residuals() {
        let n = 6;
        let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let valid = vec![planted(n, &[(0, 0)], 0.1); 5];
        let cfg = DetectConfig {
            quantile: 0.9,
            ..DetectConfig::default()
        };
        let cal = Calibration::fit(&valid, &cfg).unwrap();
        let anchors: Vec<usize> = (0..10).map(|k| 100 + 10 * k).collect();
        let mut test = vec![Array::zeros(&[n, n, 3]); 10];
        test[3] = planted(n, &[(4, 1), (4, 2), (1, 4)], 1.0);
        test[4] = planted(n, &[(4, 1), (4, 2), (4, 3), (3, 4)], 1.0);
        let result = detect(&anchors, &test, &cal, &names, &cfg).unwrap();
        assert_eq!(result.events.len(), 1);
        let e = &result.events[0];
        assert_eq!((e.start, e.end, e.peak_anchor), (130, 140, 140));
        assert_eq!(e.root_causes[0].series, 4);
        assert_eq!(e.severity, Severity::Long);
        let recs = anchor_records(&result, &test, false);
        assert_eq!(recs[4].scores, vec![4, 4, 4]);
        assert_eq!(recs[4].series_counts[0][4], 4);
    }
}
