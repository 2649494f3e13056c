//! Multivariate series data model, CSV ingestion, splitting, the sinusoid
//! generator and anomaly injection.

mod csv_io;
mod inject;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_csv, write_csv, CsvSchema};
pub use inject::{inject_anomalies, AnomalyLabel, InjectConfig};
pub use synth::{generate_synthetic, SynthConfig, WaveChoice};

/// `n` named series of equal length `T`, stored row-major (one row per series).
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    names: Vec<String>,
    values: Vec<f64>,
    len: usize,
}

impl MultivariateSeries {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Shape(format!(
                "need at least 2 series, got {}",
                rows.len()
            )));
        }
        if names.len() != rows.len() {
            return Err(Error::Shape(format!(
                "{} names for {} series",
                names.len(),
                rows.len()
            )));
        }
        let len = rows[0].len();
        if len == 0 {
            return Err(Error::Shape("series must have at least one step".into()));
        }
        let mut values = Vec::with_capacity(len * rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != len {
                return Err(Error::Shape(format!(
                    "series {i} has length {} but series 0 has {len}",
                    row.len()
                )));
            }
            if let Some(t) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Shape(format!(
                    "series {i} has non-finite value at step {t}"
                )));
            }
            values.extend_from_slice(row);
        }
        Ok(Self { names, values, len })
    }

    /// Build with default names `x0..x{n-1}`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let names = default_names(rows.len());
        Self::new(names, rows)
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.len..(i + 1) * self.len]
    }

    pub fn value(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.len + t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.len)
    }

    /// Apply `f(series_index, value)` to every entry.
    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let len = self.len;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| f(k / len, v))
            .collect();
        Self {
            names: self.names.clone(),
            values,
            len,
        }
    }
}

pub(crate) fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

/// Train/valid/test step ranges, each half-open.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: [usize; 2],
    pub valid: [usize; 2],
    pub test: [usize; 2],
}

impl SplitSpec {
    /// Train 40%, valid 10%, test 50%: the synthetic layout `[0,8000)`,
    /// `[8000,10000)`, `[10000,20000)` for `T = 20000`.
    pub fn proportional(len: usize) -> Self {
        let a = len * 2 / 5;
        let b = len / 2;
        Self {
            train: [0, a],
            valid: [a, b],
            test: [b, len],
        }
    }

    pub fn train_range(&self) -> Range<usize> {
        self.train[0]..self.train[1]
    }

    pub fn valid_range(&self) -> Range<usize> {
        self.valid[0]..self.valid[1]
    }

    pub fn test_range(&self) -> Range<usize> {
        self.test[0]..self.test[1]
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        let parts = [
            ("train", self.train),
            ("valid", self.valid),
            ("test", self.test),
        ];
        for (name, [lo, hi]) in parts {
            if lo >= hi {
                return Err(Error::Config(format!("{name} split [{lo},{hi}) is empty")));
            }
            if hi > len {
                return Err(Error::Config(format!(
                    "{name} split [{lo},{hi}) exceeds series length {len}"
                )));
            }
        }
        if self.train[1] > self.valid[0] || self.valid[1] > self.test[0] {
            return Err(Error::Config(
                "splits must be disjoint and ordered train < valid < test".into(),
            ));
        }
        Ok(())
    }
}

/// A borrowed window of a series. Windowed computations may still read
/// earlier steps of the parent series as left context.
#[derive(Clone, Copy, Debug)]
pub struct SeriesView<'a> {
    parent: &'a MultivariateSeries,
    start: usize,
    end: usize,
}

impl<'a> SeriesView<'a> {
    pub fn parent(&self) -> &'a MultivariateSeries {
        self.parent
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.parent.row(i)[self.start..self.end]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: SeriesView<'a>,
    pub valid: SeriesView<'a>,
    pub test: SeriesView<'a>,
}

pub fn split<'a>(series: &'a MultivariateSeries, spec: &SplitSpec) -> Result<Splits<'a>> {
    spec.validate(series.len())?;
    let view = |[start, end]: [usize; 2]| SeriesView {
        parent: series,
        start,
        end,
    };
    Ok(Splits {
        train: view(spec.train),
        valid: view(spec.valid),
        test: view(spec.test),
    })
}

/// Per-series mean and standard deviation over `range`.
pub fn moments(series: &MultivariateSeries, range: Range<usize>) -> (Vec<f64>, Vec<f64>) {
    series
        .rows()
        .map(|row| {
            let w = &row[range.clone()];
            let m = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w.len() as f64;
            (m, var.sqrt())
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, len: usize) -> MultivariateSeries {
        MultivariateSeries::from_rows(
            (0..n)
                .map(|i| (0..len).map(|t| (i * len + t) as f64).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_ragged_and_single_series() {
        assert!(MultivariateSeries::from_rows(vec![vec![1.0, 2.0]]).is_err());
        assert!(MultivariateSeries::from_rows(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(MultivariateSeries::from_rows(vec![vec![f64::NAN], vec![1.0]]).is_err());
    }

    #[test]
    fn proportional_split_ranges() {
        let spec = SplitSpec::proportional(20_000);
        assert_eq!(spec.train, [0, 8000]);
        assert_eq!(spec.valid, [8000, 10_000]);
        assert_eq!(spec.test, [10_000, 20_000]);
    }

    #[test]
    fn split_partitions_steps() {
        let s = ramp(3, 50);
        let spec = SplitSpec::proportional(50);
        let parts = split(&s, &spec).unwrap();
        let mut joined: Vec<f64> = Vec::new();
        for v in [parts.train, parts.valid, parts.test] {
            joined.extend_from_slice(v.row(1));
        }
        assert_eq!(joined, s.row(1));
        assert_eq!(parts.test.parent().len(), 50);
    }

    #[test]
    fn empty_valid_split_rejected() {
        let s = ramp(2, 100);
        let spec = SplitSpec {
            train: [0, 40],
            valid: [40, 40],
            test: [40, 100],
        };
        assert!(matches!(split(&s, &spec), Err(Error::Config(_))));
        let spec = SplitSpec {
            train: [0, 40],
            valid: [40, 50],
            test: [50, 101],
        };
        assert!(split(&s, &spec).is_err());
    }
}
