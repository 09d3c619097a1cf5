//! Task-specific parameter importance, top-k binary masking, row/column
//! densities, and core-region selection.
//!
//! Importance of a frozen weight entry is the absolute product of its
//! value and the mean task-loss gradient accumulated over a scoring
//! dataset. The top-k% entries form a binary mask; per-row and per-column
//! mask densities are ranked jointly to pick the rows and columns that a
//! structured adapter is allowed to touch.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{TapeMode, TargetId, TinyModel};
use crate::tensor::{tsr1, Matrix, Tape};

/// Per-parameter nonnegative sensitivity scores for one weight matrix.
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    scores: Matrix,
    sample_count: usize,
}

impl ImportanceMap {
    pub fn new(scores: Matrix, sample_count: usize) -> Result<Self> {
        if scores.data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("importance scores must be nonnegative"));
        }
        Ok(ImportanceMap {
            scores,
            sample_count,
        })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// 0/1 matrix marking the retained top-k fraction of entries.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    bits: Matrix,
    k: f64,
}

impl BinaryMask {
    pub fn new(bits: Matrix, k: f64) -> Result<Self> {
        if bits.data().iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::contract("mask entries must be 0 or 1"));
        }
        Ok(BinaryMask { bits, k })
    }

    pub fn bits(&self) -> &Matrix {
        &self.bits
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn ones(&self) -> usize {
        self.bits.data().iter().filter(|&&b| b == 1.0).count()
    }
}

/// Selected row and column index sets (the task-specific core region).
#[derive(Debug, Clone, PartialEq)]
pub struct CoreRegion {
    row_indices: Vec<usize>,
    col_indices: Vec<usize>,
    p_fraction: f64,
}

impl CoreRegion {
    /// Indices are sorted and must be unique.
    pub fn new(mut rows: Vec<usize>, mut cols: Vec<usize>, p_fraction: f64) -> Result<Self> {
        rows.sort_unstable();
        cols.sort_unstable();
        if rows.windows(2).any(|w| w[0] == w[1]) || cols.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("core region indices must be unique"));
        }
        Ok(CoreRegion {
            row_indices: rows,
            col_indices: cols,
            p_fraction,
        })
    }

    pub fn rows(&self) -> &[usize] {
        &self.row_indices
    }

    pub fn cols(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn p_fraction(&self) -> f64 {
        self.p_fraction
    }

    pub fn validate_bounds(&self, p: usize, q: usize) -> Result<()> {
        if self.row_indices.iter().any(|&i| i >= p) || self.col_indices.iter().any(|&j| j >= q) {
            return Err(Error::contract(format!(
                "core region indices out of range for a {p}x{q} matrix"
            )));
        }
        Ok(())
    }

    /// Plain-text export: `rows: i1,i2,...` / `cols: j1,j2,...`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        let join = |ix: &[usize]| {
            ix.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(text, "rows: {}", join(&self.row_indices));
        let _ = writeln!(text, "cols: {}", join(&self.col_indices));
        std::fs::write(path, text).map_err(|e| Error::io(&path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
        let mut rows = None;
        let mut cols = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse = |body: &str| -> Result<Vec<usize>> {
                let body = body.trim();
                if body.is_empty() {
                    return Ok(Vec::new());
                }
                body.split(',')
                    .map(|tok| {
                        tok.trim().parse::<usize>().map_err(|_| Error::Parse {
                            line: lineno + 1,
                            msg: format!("bad index `{tok}`"),
                        })
                    })
                    .collect()
            };
            if let Some(body) = line.strip_prefix("rows:") {
                rows = Some(parse(body)?);
            } else if let Some(body) = line.strip_prefix("cols:") {
                cols = Some(parse(body)?);
            } else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("unrecognized region line `{line}`"),
                });
            }
        }
        match (rows, cols) {
            (Some(r), Some(c)) => CoreRegion::new(r, c, 0.0),
            _ => Err(Error::Parse {
                line: 0,
                msg: "region file must contain `rows:` and `cols:` lines".into(),
            }),
        }
    }
}

/// How per-batch gradients are combined before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradAggregation {
    /// One mean gradient over the whole scoring set, scored once (default).
    MeanGradient,
    /// Per-batch scores summed; keeps cancellation-prone signals visible.
    SumScores,
}

/// `|theta * mean-gradient|` per entry for one frozen target matrix.
pub fn sensitivity_scores(
    model: &TinyModel,
    batches: &[(Matrix, crate::models::BatchTargets)],
    target: TargetId,
    aggregation: GradAggregation,
) -> Result<ImportanceMap> {
    scores_impl(model, batches, target, aggregation, true)
}

/// Gradient-only variant: `|mean-gradient|` per entry.
pub fn gradient_scores(
    model: &TinyModel,
    batches: &[(Matrix, crate::models::BatchTargets)],
    target: TargetId,
    aggregation: GradAggregation,
) -> Result<ImportanceMap> {
    scores_impl(model, batches, target, aggregation, false)
}

fn scores_impl(
    model: &TinyModel,
    batches: &[(Matrix, crate::models::BatchTargets)],
    target: TargetId,
    aggregation: GradAggregation,
    weight_by_theta: bool,
) -> Result<ImportanceMap> {
    if batches.is_empty() {
        return Err(Error::contract("importance scoring requires a non-empty dataset"));
    }
    let w0 = model.weight(target)?;
    let (p, q) = w0.shape();
    let mut acc = Matrix::zeros(p, q);
    let mut samples = 0usize;
    for (inputs, targets) in batches {
        let mut tape = Tape::new();
        let x = tape.constant(inputs.clone());
        let refs = model.forward_taped(&mut tape, x, TapeMode::ObserveWeight(target))?;
        let loss = model.loss_on_tape(&mut tape, refs.output, targets)?;
        let loss_value = tape.value(loss).get(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss while scoring batch {samples}"
            )));
        }
        let grads = tape.backward(loss)?;
        let observed = refs
            .observed
            .ok_or_else(|| Error::contract("target weight was not observed"))?;
        let g = grads
            .get(observed)
            .ok_or_else(|| Error::contract("no gradient recorded for observed weight"))?;
        match aggregation {
            GradAggregation::MeanGradient => {
                acc = acc.add(g)?;
            }
            GradAggregation::SumScores => {
                let scored = if weight_by_theta {
                    w0.hadamard(g)?.map(f64::abs)
                } else {
                    g.map(f64::abs)
                };
                acc = acc.add(&scored)?;
            }
        }
        samples += inputs.cols();
    }
    let scores = match aggregation {
        GradAggregation::MeanGradient => {
            let mean = acc.scale(1.0 / batches.len() as f64);
            if weight_by_theta {
                w0.hadamard(&mean)?.map(f64::abs)
            } else {
                mean.map(f64::abs)
            }
        }
        GradAggregation::SumScores => acc,
    };
    ImportanceMap::new(scores, samples)
}

/// Binary mask of the `ceil(k * N)` largest scores; ties broken by
/// ascending row-major index.
pub fn topk_mask(imp: &ImportanceMap, k: f64) -> Result<BinaryMask> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::contract(format!("top-k fraction {k} outside (0, 1]")));
    }
    let scores = imp.scores();
    let n = scores.len();
    let keep = (k * n as f64).ceil() as usize;
    let keep = keep.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.data()[b]
            .partial_cmp(&scores.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut bits = vec![0.0; n];
    for &i in order.iter().take(keep) {
        bits[i] = 1.0;
    }
    BinaryMask::new(Matrix::from_vec(scores.rows(), scores.cols(), bits)?, k)
}

/// Per-row and per-column mean of the mask bits.
pub fn density(mask: &BinaryMask) -> (Vec<f64>, Vec<f64>) {
    let bits = mask.bits();
    let (p, q) = bits.shape();
    let mut u_row = vec![0.0; p];
    let mut u_col = vec![0.0; q];
    for i in 0..p {
        for j in 0..q {
            let b = bits.get(i, j);
            u_row[i] += b;
            u_col[j] += b;
        }
    }
    for v in u_row.iter_mut() {
        *v /= q as f64;
    }
    for v in u_col.iter_mut() {
        *v /= p as f64;
    }
    (u_row, u_col)
}

/// Jointly ranks row and column densities and keeps the top
/// `ceil(p_fraction * (p + q))` entries. Ties break rows before columns,
/// then ascending index.
pub fn select_core_region(u_row: &[f64], u_col: &[f64], p_fraction: f64) -> Result<CoreRegion> {
    if !(p_fraction > 0.0 && p_fraction <= 1.0) {
        return Err(Error::contract(format!(
            "core-region fraction {p_fraction} outside (0, 1]"
        )));
    }
    let total = u_row.len() + u_col.len();
    if total == 0 {
        return Err(Error::contract("select_core_region: empty density vectors"));
    }
    let take = ((p_fraction * total as f64).ceil() as usize).clamp(1, total);
    // (score, kind, index); kind 0 = row, 1 = column.
    let mut joint: Vec<(f64, u8, usize)> = Vec::with_capacity(total);
    joint.extend(u_row.iter().enumerate().map(|(i, &s)| (s, 0u8, i)));
    joint.extend(u_col.iter().enumerate().map(|(j, &s)| (s, 1u8, j)));
    joint.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for &(_, kind, idx) in joint.iter().take(take) {
        if kind == 0 {
            rows.push(idx);
        } else {
            cols.push(idx);
        }
    }
    CoreRegion::new(rows, cols, p_fraction)
}

/// Writes importance artifacts for one target: scores, mask, densities.
pub fn save_importance_artifacts(
    dir: &Path,
    prefix: &str,
    imp: &ImportanceMap,
    mask: &BinaryMask,
    u_row: &[f64],
    u_col: &[f64],
    region: &CoreRegion,
) -> Result<()> {
    let dtype = tsr1::Dtype::F64;
    tsr1::write_matrix(&dir.join(format!("{prefix}_scores.tsr")), imp.scores(), dtype)?;
    tsr1::write_matrix(&dir.join(format!("{prefix}_mask.tsr")), mask.bits(), dtype)?;
    tsr1::write_vector(&dir.join(format!("{prefix}_u_row.tsr")), u_row, dtype)?;
    tsr1::write_vector(&dir.join(format!("{prefix}_u_col.tsr")), u_col, dtype)?;
    region.save(&dir.join(format!("{prefix}_region.txt")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(rows: usize, cols: usize, data: Vec<f64>) -> ImportanceMap {
        ImportanceMap::new(Matrix::from_vec(rows, cols, data).unwrap(), 1).unwrap()
    }

    #[test]
    fn sensitivity_formula_direct() {
        // scores = |theta ⊙ g| entrywise.
        let theta = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        let g = Matrix::from_rows(&[&[0.5, 0.1, -4.0]]).unwrap();
        let scores = theta.hadamard(&g).unwrap().map(f64::abs);
        assert_eq!(scores.data(), &[0.5, 0.2, 2.0]);
    }

    #[test]
    fn topk_full_retention_is_all_ones() {
        let m = imp(2, 2, vec![0.3, 0.1, 0.4, 0.2]);
        let mask = topk_mask(&m, 1.0).unwrap();
        assert!(mask.bits().data().iter().all(|&b| b == 1.0));
    }

    #[test]
    fn topk_half_matches_brute_force_sort() {
        let m = imp(2, 2, vec![4.0, 1.0, 3.0, 2.0]);
        let mask = topk_mask(&m, 0.5).unwrap();
        assert_eq!(mask.bits().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn topk_tie_break_prefers_low_flat_index() {
        let m = imp(2, 2, vec![7.0; 4]);
        let mask = topk_mask(&m, 0.25).unwrap();
        assert_eq!(mask.bits().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_rejects_bad_fraction() {
        let m = imp(1, 2, vec![1.0, 2.0]);
        assert!(topk_mask(&m, 0.0).is_err());
        assert!(topk_mask(&m, 1.5).is_err());
    }

    #[test]
    fn density_direct_evaluation() {
        let mask = BinaryMask::new(
            Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]).unwrap(),
            0.75,
        )
        .unwrap();
        let (u_row, u_col) = density(&mask);
        assert_eq!(u_row, vec![0.5, 1.0]);
        assert_eq!(u_col, vec![1.0, 0.5]);
    }

    #[test]
    fn density_of_zero_mask_is_zero() {
        let mask = BinaryMask::new(Matrix::zeros(3, 4), 0.0).unwrap();
        let (u_row, u_col) = density(&mask);
        assert!(u_row.iter().chain(&u_col).all(|&v| v == 0.0));
    }

    #[test]
    fn select_core_region_joint_ranking() {
        let region = select_core_region(&[0.9, 0.1], &[0.5, 0.7, 0.2], 0.4).unwrap();
        assert_eq!(region.rows(), &[0]);
        assert_eq!(region.cols(), &[1]);
    }

    #[test]
    fn select_core_region_full_fraction_takes_everything() {
        let region = select_core_region(&[0.1, 0.2], &[0.3], 1.0).unwrap();
        assert_eq!(region.rows(), &[0, 1]);
        assert_eq!(region.cols(), &[0]);
    }

    #[test]
    fn select_core_region_tie_break_rows_first() {
        // All densities equal; 2 of 5 slots go to rows 0 and 1.
        let region = select_core_region(&[0.5, 0.5], &[0.5, 0.5, 0.5], 0.4).unwrap();
        assert_eq!(region.rows(), &[0, 1]);
        assert!(region.cols().is_empty());
    }

    #[test]
    fn region_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("region.txt");
        let region = CoreRegion::new(vec![1, 3], vec![2], 0.1).unwrap();
        region.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "rows: 1,3\ncols: 2\n");
        let back = CoreRegion::load(&path).unwrap();
        assert_eq!(back.rows(), region.rows());
        assert_eq!(back.cols(), region.cols());
    }
}
