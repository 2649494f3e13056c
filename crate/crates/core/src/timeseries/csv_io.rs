use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{default_names, MultivariateSeries};
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Layout of a series CSV: one column per series, one row per time step,
/// optionally preceded by a single header row of series names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub has_header: bool,
    pub delimiter: u8,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            has_header: true,
            delimiter: b',',
        }
    }
}

pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<MultivariateSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let header: Option<Vec<String>> = if schema.has_header {
        let h = reader.headers().map_err(|e| csv_error(path, e))?;
        Some(h.iter().map(str::to_owned).collect())
    } else {
        None
    };

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut width = header.as_ref().map(Vec::len);
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Shape(format!(
                "line {line} has {} fields, expected {w}",
                record.len()
            )));
        }
        if columns.is_empty() {
            columns = vec![Vec::new(); w];
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("field {} is not a number: {field:?}", c + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("field {} is not finite", c + 1),
                });
            }
            columns[c].push(v);
        }
    }
    if columns.is_empty() {
        return Err(Error::Shape(format!(
            "{} contains no data rows",
            path.display()
        )));
    }
    let names = header.unwrap_or_else(|| default_names(columns.len()));
    MultivariateSeries::new(names, columns)
}

pub fn write_csv(series: &MultivariateSeries, path: &Path, schema: CsvSchema) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(schema.delimiter)
        .from_writer(Vec::new());
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    if schema.has_header {
        writer.write_record(series.names()).map_err(fmt_err)?;
    }
    let mut record = Vec::with_capacity(series.n());
    for t in 0..series.len() {
        record.clear();
        // `Display` for f64 prints the shortest string that parses back exactly.
        record.extend((0..series.n()).map(|i| series.value(i, t).to_string()));
        writer.write_record(&record).map_err(fmt_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use std::fs;

    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zeros_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        fs::write(&p, "0,0,0\n0,0,0\n0,0,0\n0,0,0\n0,0,0\n").unwrap();
        let schema = CsvSchema {
            has_header: false,
            delimiter: b',',
        };
        let s = load_csv(&p, schema).unwrap();
        assert_eq!((s.n(), s.len()), (3, 5));
        assert!(s.rows().all(|r| r.iter().all(|&v| v == 0.0)));
        assert_eq!(s.names()[2], "x2");
    }

    #[test]
    fn header_names_are_used() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, "temp;pressure\n1.5;2\n3;4\n").unwrap();
        let schema = CsvSchema {
            has_header: true,
            delimiter: b';',
        };
        let s = load_csv(&p, schema).unwrap();
        assert_eq!(s.names(), ["temp", "pressure"]);
        assert_eq!(s.row(0), [1.5, 3.0]);
    }

    #[test]
    fn malformed_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "a,b\n1,2\n3,oops\n").unwrap();
        match load_csv(&p, CsvSchema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, "a,b\n1,2\n3\n").unwrap();
        assert!(matches!(
            load_csv(&p, CsvSchema::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = seeded(11);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..2000).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect())
            .collect();
        let s = MultivariateSeries::from_rows(rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        write_csv(&s, &p, CsvSchema::default()).unwrap();
        let back = load_csv(&p, CsvSchema::default()).unwrap();
        assert_eq!(back.names(), s.names());
        for (a, b) in back.rows().zip(s.rows()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
