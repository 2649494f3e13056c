//! Multi-scale signature matrices: for each window length `w`, the
//! `n x n` matrix of trailing-window inner products
//! `m_ij(t) = sum_{d=0..=w} x_i(t-d) x_j(t-d) / w`.
//!
//! The sum covers `w + 1` points while the rescale factor is `w`, so a
//! constant series of ones yields `(w + 1) / w`, not 1.

mod cache;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::timeseries::{moments, MultivariateSeries};

pub use cache::{read_cache, write_cache, CacheHeader, CACHE_MAGIC, CACHE_VERSION};

/// Windowed inner product of two equal-length windows divided by `kappa`.
pub fn pair_correlation(xi: &[f64], xj: &[f64], kappa: f64) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::Shape(format!(
            "window lengths differ: {} vs {}",
            xi.len(),
            xj.len()
        )));
    }
    if !(kappa > 0.0) {
        return Err(Error::Config(format!(
            "rescale factor must be positive, got {kappa}"
        )));
    }
    Ok(xi.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>() / kappa)
}

/// One `n x n x s` stack of signature matrices anchored at a time step.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureTensor {
    pub data: Array,
    pub anchor: usize,
    pub scales: Vec<usize>,
}

impl SignatureTensor {
    pub fn n(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        let n = self.n();
        let s = self.scales.len();
        self.data.data()[(i * n + j) * s + c]
    }
}

fn check_scales(scales: &[usize]) -> Result<usize> {
    if scales.is_empty() || scales.contains(&0) {
        return Err(Error::Config(format!(
            "scales must be non-empty and positive: {scales:?}"
        )));
    }
    Ok(*scales.iter().max().unwrap())
}

/// Raw `n x n x s` signature data at step `t`.
pub fn signature_array(series: &MultivariateSeries, t: usize, scales: &[usize]) -> Result<Array> {
    let max_w = check_scales(scales)?;
    if t < max_w {
        return Err(Error::Context(format!(
            "anchor {t} needs {max_w} steps of history; first valid anchor is {max_w}"
        )));
    }
    if t >= series.len() {
        return Err(Error::Context(format!(
            "anchor {t} is past the end of a series of length {}",
            series.len()
        )));
    }
    let n = series.n();
    let s = scales.len();
    let mut data = vec![0.0; n * n * s];
    for (c, &w) in scales.iter().enumerate() {
        let lo = t - w;
        let kappa = w as f64;
        for i in 0..n {
            let xi = &series.row(i)[lo..=t];
            for j in i..n {
                let xj = &series.row(j)[lo..=t];
                let v = xi.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>() / kappa;
                data[(i * n + j) * s + c] = v;
                data[(j * n + i) * s + c] = v;
            }
        }
    }
    Array::from_vec(vec![n, n, s], data)
}

pub fn signature_tensor(
    series: &MultivariateSeries,
    t: usize,
    scales: &[usize],
) -> Result<SignatureTensor> {
    Ok(SignatureTensor {
        data: signature_array(series, t, scales)?,
        anchor: t,
        scales: scales.to_vec(),
    })
}

/// `h` signature tensors at anchors `t - (h-1) g, ..., t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureSequence {
    pub tensors: Vec<SignatureTensor>,
    pub gap: usize,
}

impl SignatureSequence {
    pub fn anchors(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.anchor).collect()
    }

    pub fn last(&self) -> &SignatureTensor {
        self.tensors.last().expect("sequence is never empty")
    }
}

fn history_need(scales: &[usize], h: usize, g: usize) -> Result<usize> {
    if h == 0 || g == 0 {
        return Err(Error::Config(format!(
            "history h={h} and gap g={g} must be >= 1"
        )));
    }
    Ok(check_scales(scales)? + (h - 1) * g)
}

pub fn signature_sequence(
    series: &MultivariateSeries,
    t: usize,
    scales: &[usize],
    h: usize,
    g: usize,
) -> Result<SignatureSequence> {
    let need = history_need(scales, h, g)?;
    if t < need {
        return Err(Error::Context(format!(
            "anchor {t} with h={h}, g={g} lacks history; first valid anchor is {need}"
        )));
    }
    let tensors = (0..h)
        .map(|k| signature_tensor(series, t - (h - 1 - k) * g, scales))
        .collect::<Result<_>>()?;
    Ok(SignatureSequence { tensors, gap: g })
}

/// Anchors `lo + k g` inside `split` that have full left context.
/// Context may reach before `split.start`.
pub fn anchor_schedule(
    split: Range<usize>,
    scales: &[usize],
    h: usize,
    g: usize,
) -> Result<Vec<usize>> {
    let need = history_need(scales, h, g)?;
    let first = if split.start >= need {
        split.start
    } else {
        split.start + (need - split.start).div_ceil(g) * g
    };
    Ok((first..split.end).step_by(g).collect())
}

/// Per-series affine standardization fitted on a reference range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Zero mean, unit variance over `range`. Constant series keep scale 1.
    pub fn fit(series: &MultivariateSeries, range: Range<usize>) -> Self {
        let (mean, std) = moments(series, range);
        let std = std
            .into_iter()
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        if self.mean.len() != series.n() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} series applied to {}",
                self.mean.len(),
                series.n()
            )));
        }
        Ok(series.map_values(|i, v| (v - self.mean[i]) / self.std[i]))
    }
}

/// Signature tensors for many steps, computed once and shared by every
/// sequence that needs them.
#[derive(Clone, Debug)]
pub struct SignatureBank {
    scales: Vec<usize>,
    h: usize,
    g: usize,
    tensors: BTreeMap<usize, Arc<Array>>,
}

impl SignatureBank {
    /// Build the tensors every sequence ending at one of `anchors` needs.
    pub fn build(
        series: &MultivariateSeries,
        anchors: &[usize],
        scales: &[usize],
        h: usize,
        g: usize,
        exec: Exec,
    ) -> Result<Self> {
        history_need(scales, h, g)?;
        let mut steps: Vec<usize> = anchors
            .iter()
            .flat_map(|&t| (0..h).filter_map(move |k| t.checked_sub(k * g)))
            .collect();
        steps.sort_unstable();
        steps.dedup();
        let arrays = exec.map(&steps, |&t| signature_array(series, t, scales));
        let mut tensors = BTreeMap::new();
        for (t, a) in steps.into_iter().zip(arrays) {
            tensors.insert(t, Arc::new(a?));
        }
        Ok(Self {
            scales: scales.to_vec(),
            h,
            g,
            tensors,
        })
    }

    pub fn from_tensors(
        scales: Vec<usize>,
        h: usize,
        g: usize,
        tensors: BTreeMap<usize, Arc<Array>>,
    ) -> Self {
        Self {
            scales,
            h,
            g,
            tensors,
        }
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn history(&self) -> usize {
        self.h
    }

    pub fn gap(&self) -> usize {
        self.g
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, &Arc<Array>)> {
        self.tensors.iter().map(|(&t, a)| (t, a))
    }

    pub fn tensor(&self, t: usize) -> Option<&Arc<Array>> {
        self.tensors.get(&t)
    }

    /// The `h` tensors ending at `anchor`, oldest first.
    pub fn sequence(&self, anchor: usize) -> Result<Vec<Arc<Array>>> {
        (0..self.h)
            .rev()
            .map(|k| {
                anchor
                    .checked_sub(k * self.g)
                    .and_then(|t| self.tensors.get(&t))
                    .cloned()
                    .ok_or_else(|| {
                        Error::Context(format!(
                            "no signature tensor cached for anchor {anchor} (offset {k})"
                        ))
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
