//! Shock-pulse anomaly injection.
//!
//! Draw order for a given seed: shuffle of the duration pool, then the
//! placement offsets, then per event (in time order) the cause set and one
//! sign per cause.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{moments, MultivariateSeries};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Ground truth for one injected anomaly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyLabel {
    pub start: usize,
    pub duration: usize,
    pub root_causes: Vec<usize>,
}

impl AnomalyLabel {
    pub fn end(&self) -> usize {
        self.start + self.duration
    }

    pub fn validate(&self, n: usize, len: usize) -> Result<()> {
        if self.duration == 0 || self.end() > len {
            return Err(Error::Config(format!(
                "label [{}, {}) outside series of length {len}",
                self.start,
                self.end()
            )));
        }
        if self.root_causes.is_empty() || self.root_causes.iter().any(|&c| c >= n) {
            return Err(Error::Config(format!(
                "label root causes {:?} invalid for n={n}",
                self.root_causes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectConfig {
    pub count: usize,
    pub durations: Vec<usize>,
    pub causes_per_event: usize,
    /// Step range events are placed in.
    pub region: [usize; 2],
    /// Step range whose per-series standard deviation sets the pulse amplitude.
    pub reference: [usize; 2],
    pub amplitude_factor: f64,
    /// Minimum number of clean steps before, between and after events.
    pub min_gap: usize,
    pub seed: u64,
}

impl Default for InjectConfig {
    fn default() -> Self {
        Self {
            count: 5,
            durations: vec![30, 60, 90],
            causes_per_event: 3,
            region: [10_000, 20_000],
            reference: [0, 8000],
            amplitude_factor: 1.5,
            min_gap: 60,
            seed: 0,
        }
    }
}

/// Add `count` half-sine pulses to randomly chosen series.
///
/// Durations are dealt from the pool repeated to `count` entries and
/// shuffled, so every pool value appears once `count >= durations.len()`.
/// Events are laid out without overlap by distributing the free slack of
/// the region uniformly at random.
pub fn inject_anomalies(
    series: &MultivariateSeries,
    cfg: &InjectConfig,
) -> Result<(MultivariateSeries, Vec<AnomalyLabel>)> {
    let mut out = series.clone();
    if cfg.count == 0 {
        return Ok((out, Vec::new()));
    }
    let n = series.n();
    let [lo, hi] = cfg.region;
    if lo >= hi || hi > series.len() {
        return Err(Error::Placement(format!(
            "region [{lo},{hi}) does not fit a series of length {}",
            series.len()
        )));
    }
    if cfg.durations.is_empty() || cfg.durations.contains(&0) {
        return Err(Error::Config(
            "durations must be non-empty and positive".into(),
        ));
    }
    if cfg.causes_per_event == 0 || cfg.causes_per_event > n {
        return Err(Error::Config(format!(
            "causes_per_event must be in 1..={n}, got {}",
            cfg.causes_per_event
        )));
    }
    let [rlo, rhi] = cfg.reference;
    if rlo >= rhi || rhi > series.len() {
        return Err(Error::Config(format!(
            "reference range [{rlo},{rhi}) invalid"
        )));
    }

    let mut rng = seeded(cfg.seed);
    let mut durations: Vec<usize> = cfg
        .durations
        .iter()
        .copied()
        .cycle()
        .take(cfg.count)
        .collect();
    durations.shuffle(&mut rng);

    let needed: usize = durations.iter().sum::<usize>() + (cfg.count + 1) * cfg.min_gap;
    let region_len = hi - lo;
    if needed > region_len {
        return Err(Error::Placement(format!(
            "{} events need at least {needed} steps but the region has {region_len}",
            cfg.count
        )));
    }
    let slack = region_len - needed;
    let mut offsets: Vec<usize> = (0..cfg.count).map(|_| rng.gen_range(0..=slack)).collect();
    offsets.sort_unstable();

    let (_, stds) = moments(series, rlo..rhi);
    let mut labels = Vec::with_capacity(cfg.count);
    let mut cursor = lo;
    for (k, (&duration, &offset)) in durations.iter().zip(&offsets).enumerate() {
        let prev_offset = if k == 0 { 0 } else { offsets[k - 1] };
        let start = cursor + cfg.min_gap + (offset - prev_offset);
        cursor = start + duration;

        let mut causes = index::sample(&mut rng, n, cfg.causes_per_event).into_vec();
        causes.sort_unstable();
        for &c in &causes {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let amplitude = sign * cfg.amplitude_factor * stds[c];
            let row = out.row_mut(c);
            for (k, v) in row[start..start + duration].iter_mut().enumerate() {
                let phase = std::f64::consts::PI * (k as f64 + 0.5) / duration as f64;
                *v += amplitude * phase.sin();
            }
        }
        labels.push(AnomalyLabel {
            start,
            duration,
            root_causes: causes,
        });
    }
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{generate_synthetic, SynthConfig};

    fn full_data(seed: u64) -> MultivariateSeries {
        generate_synthetic(&SynthConfig {
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_count_is_identity() {
        let s = generate_synthetic(&SynthConfig {
            n: 4,
            len: 200,
            ..Default::default()
        })
        .unwrap();
        let cfg = InjectConfig {
            count: 0,
            ..Default::default()
        };
        let (out, labels) = inject_anomalies(&s, &cfg).unwrap();
        assert_eq!(out, s);
        assert!(labels.is_empty());
    }

    #[test]
    fn full_preset_layout() {
        let s = full_data(1);
        let cfg = InjectConfig {
            seed: 5,
            ..Default::default()
        };
        let (_, labels) = inject_anomalies(&s, &cfg).unwrap();
        assert_eq!(labels.len(), 5);
        for l in &labels {
            assert_eq!(l.root_causes.len(), 3);
            assert!(l.start >= 10_000 && l.end() <= 20_000);
            assert!([30, 60, 90].contains(&l.duration));
        }
        for d in [30, 60, 90] {
            assert!(labels.iter().any(|l| l.duration == d));
        }
    }

    #[test]
    fn only_labeled_cells_change_and_shift_is_visible() {
        let s = full_data(2);
        let cfg = InjectConfig {
            seed: 8,
            ..Default::default()
        };
        let (out, labels) = inject_anomalies(&s, &cfg).unwrap();
        let mut touched = vec![vec![false; s.len()]; s.n()];
        for l in &labels {
            for &c in &l.root_causes {
                for t in l.start..l.end() {
                    touched[c][t] = true;
                }
                // mean shift against the standard error of the clean region mean
                let before = &s.row(c)[l.start..l.end()];
                let after = &out.row(c)[l.start..l.end()];
                let m0 = before.iter().sum::<f64>() / l.duration as f64;
                let m1 = after.iter().sum::<f64>() / l.duration as f64;
                let sd0 = (before.iter().map(|v| (v - m0).powi(2)).sum::<f64>()
                    / l.duration as f64)
                    .sqrt();
                let se = sd0 / (l.duration as f64).sqrt();
                assert!(
                    (m1 - m0).abs() >= 3.0 * se,
                    "shift {} vs se {se}",
                    (m1 - m0).abs()
                );
            }
        }
        for i in 0..s.n() {
            for t in 0..s.len() {
                let same = s.value(i, t).to_bits() == out.value(i, t).to_bits();
                assert_eq!(same, !touched[i][t], "cell ({i},{t})");
            }
        }
    }

    #[test]
    fn region_too_small() {
        let s = full_data(3);
        let cfg = InjectConfig {
            region: [19_700, 20_000],
            ..Default::default()
        };
        assert!(matches!(
            inject_anomalies(&s, &cfg),
            Err(Error::Placement(_))
        ));
    }

    #[test]
    fn labels_valid_and_disjoint_over_seeds() {
        let s = generate_synthetic(&SynthConfig {
            n: 10,
            len: 2000,
            ..Default::default()
        })
        .unwrap();
        for seed in 0..100 {
            let cfg = InjectConfig {
                region: [1000, 2000],
                reference: [0, 800],
                seed,
                ..Default::default()
            };
            let (_, labels) = inject_anomalies(&s, &cfg).unwrap();
            for l in &labels {
                l.validate(10, 2000).unwrap();
                assert_eq!(l.root_causes.len(), 3);
            }
            for w in labels.windows(2) {
                assert!(w[0].end() + cfg.min_gap <= w[1].start);
            }
        }
    }
}
