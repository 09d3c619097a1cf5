//! CSV dataset ingestion: numeric feature columns with the label last.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::BatchTargets;
use crate::tensor::Matrix;
use crate::train::{Batches, EvalData, MetricKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvLabel {
    /// Label column holds a class index.
    Class,
    /// Label column holds a real-valued target.
    Target,
}

#[derive(Debug, Clone, Copy)]
pub struct CsvSchema {
    pub features: usize,
    pub label: CsvLabel,
}

/// Parsed CSV rows: one example per row, features in file order.
#[derive(Debug, Clone)]
pub struct CsvData {
    /// `n x features`, one row per example.
    pub features: Matrix,
    pub labels: Vec<f64>,
}

pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<CsvData> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let width = schema.features + 1;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(schema.features);
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad number `{field}` in column {}", col + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite value in column {}", col + 1),
                });
            }
            if col < schema.features {
                row.push(v);
            } else {
                match schema.label {
                    CsvLabel::Class => {
                        if v < 0.0 || v.fract() != 0.0 {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: format!("class label `{field}` is not a nonnegative integer"),
                            });
                        }
                        labels.push(v);
                    }
                    CsvLabel::Target => labels.push(v),
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{}: empty dataset", path.display()),
        });
    }
    let n = rows.len();
    let mut data = Vec::with_capacity(n * schema.features);
    for row in &rows {
        data.extend_from_slice(row);
    }
    Ok(CsvData {
        features: Matrix::from_vec(n, schema.features, data)?,
        labels,
    })
}

/// Writes one example per line, features then label, shortest round-trip
/// float formatting.
pub fn write_csv_dataset(path: &Path, data: &CsvData) -> Result<()> {
    let mut out = String::new();
    for (i, &label) in data.labels.iter().enumerate() {
        for j in 0..data.features.cols() {
            out.push_str(&format!("{},", data.features.get(i, j)));
        }
        out.push_str(&format!("{label}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(&path.display().to_string(), e))
}

impl CsvData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Activation-layout inputs (`features x n`) plus typed targets.
    pub fn to_inputs_targets(&self, label: CsvLabel) -> (Matrix, BatchTargets) {
        let inputs = self.features.transpose();
        let targets = match label {
            CsvLabel::Class => BatchTargets::Class(self.labels.iter().map(|&v| v as usize).collect()),
            CsvLabel::Target => {
                BatchTargets::Real(Matrix::from_raw(1, self.labels.len(), self.labels.clone()))
            }
        };
        (inputs, targets)
    }

    /// Deterministic front/back split into train batches and an eval set.
    pub fn split(
        &self,
        label: CsvLabel,
        eval_fraction: f64,
        batch_size: usize,
        metric: MetricKind,
    ) -> Result<(Batches, EvalData)> {
        let n = self.len();
        let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
        let n_train = n - n_eval;
        let (inputs, targets) = self.to_inputs_targets(label);
        let all = super::planted::slice_batches(&inputs, &targets, n);
        let (full_x, full_t) = &all[0];
        let train_x = sub_cols(full_x, 0, n_train);
        let eval_x = sub_cols(full_x, n_train, n);
        let (train_t, eval_t) = match full_t {
            BatchTargets::Real(t) => (
                BatchTargets::Real(sub_cols(t, 0, n_train)),
                BatchTargets::Real(sub_cols(t, n_train, n)),
            ),
            BatchTargets::Class(y) => (
                BatchTargets::Class(y[..n_train].to_vec()),
                BatchTargets::Class(y[n_train..].to_vec()),
            ),
        };
        Ok((
            super::planted::slice_batches(&train_x, &train_t, batch_size),
            EvalData {
                inputs: eval_x,
                targets: eval_t,
                metric,
            },
        ))
    }
}

fn sub_cols(m: &Matrix, start: usize, end: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), end - start);
    for i in 0..m.rows() {
        for j in start..end {
            out.set(i, j - start, m.get(i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_file_parses_to_3x2_plus_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n").unwrap();
        let schema = CsvSchema { features: 2, label: CsvLabel::Class };
        let data = load_csv_dataset(&path, &schema).unwrap();
        assert_eq!(data.features.shape(), (3, 2));
        assert_eq!(data.labels, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_file_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        let schema = CsvSchema { features: 2, label: CsvLabel::Class };
        assert!(matches!(
            load_csv_dataset(&path, &schema),
            Err(Error::Parse { line: 0, .. })
        ));
    }

    #[test]
    fn width_mismatch_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1.0,2.0,0\n3.0,1\n").unwrap();
        let schema = CsvSchema { features: 2, label: CsvLabel::Class };
        match load_csv_dataset(&path, &schema) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_lossless_for_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        let data = CsvData {
            features: Matrix::from_rows(&[
                &[0.1, -7.25e-13],
                &[std::f64::consts::PI, 1.0 / 3.0],
            ])
            .unwrap(),
            labels: vec![0.30000000000000004, -2.5],
        };
        write_csv_dataset(&path, &data).unwrap();
        let schema = CsvSchema { features: 2, label: CsvLabel::Target };
        let back = load_csv_dataset(&path, &schema).unwrap();
        assert_eq!(back.features.data(), data.features.data());
        assert_eq!(back.labels, data.labels);
    }
}
