//! Structured rank-r adapter modules.
//!
//! An adapter is a factor pair `left (p x r)` and `right (r x q)` whose
//! effective weight update is `(left ⊙ M_left) · (right ⊙ M_right)`.
//! The row stage masks whole rows of the left factor, the column stage
//! whole columns of the right factor, so the materialized delta touches
//! only the selected core region. Masks are constants for the lifetime of
//! a stage; masked entries never receive gradient.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::importance::CoreRegion;
use crate::rng;
use crate::tensor::{tsr1, Matrix, Tape, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Row,
    Column,
    Dense,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Row => "row",
            Stage::Column => "column",
            Stage::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseLoraModule {
    left: Matrix,
    right: Matrix,
    stage: Stage,
    left_mask: Option<Matrix>,
    right_mask: Option<Matrix>,
    rank: usize,
    rho: f64,
}

/// Fraction of delta entries forced to zero by the structural mask.
pub fn pruning_ratio(region: &CoreRegion, stage: Stage, p: usize, q: usize) -> f64 {
    match stage {
        Stage::Row => 1.0 - region.rows().len() as f64 / p as f64,
        Stage::Column => 1.0 - region.cols().len() as f64 / q as f64,
        Stage::Dense => 0.0,
    }
}

/// Sparsity-compensating learning rate: `base_lr * sqrt(1 / (1 - rho))`.
pub fn scaled_lr(base_lr: f64, rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::contract(format!("pruning ratio {rho} outside [0, 1)")));
    }
    Ok(base_lr * (1.0 / (1.0 - rho)).sqrt())
}

/// Zero left factor, uniform `(-1/sqrt(q), 1/sqrt(q))` right factor, and a
/// structural mask cut from the region for the requested stage.
pub fn init_adapter(
    p: usize,
    q: usize,
    r: usize,
    stage: Stage,
    region: &CoreRegion,
    seed: u64,
) -> Result<SparseLoraModule> {
    if r == 0 {
        return Err(Error::contract("adapter rank must be >= 1"));
    }
    region.validate_bounds(p, q)?;
    match stage {
        Stage::Row if region.rows().is_empty() => {
            return Err(Error::contract("row stage requires a non-empty row set"));
        }
        Stage::Column if region.cols().is_empty() => {
            return Err(Error::contract("column stage requires a non-empty column set"));
        }
        _ => {}
    }

    let left = Matrix::zeros(p, r);
    let bound = 1.0 / (q as f64).sqrt();
    let mut rng = rng::rng_from(seed);
    let right = Matrix::from_raw(
        r,
        q,
        (0..r * q).map(|_| rng.gen_range(-bound..bound)).collect(),
    );

    let (left_mask, right_mask) = match stage {
        Stage::Row => {
            let mut m = Matrix::zeros(p, r);
            for &i in region.rows() {
                for c in 0..r {
                    m.set(i, c, 1.0);
                }
            }
            (Some(m), None)
        }
        Stage::Column => {
            let mut m = Matrix::zeros(r, q);
            for &j in region.cols() {
                for row in 0..r {
                    m.set(row, j, 1.0);
                }
            }
            (None, Some(m))
        }
        Stage::Dense => (None, None),
    };

    Ok(SparseLoraModule {
        left,
        right,
        stage,
        left_mask,
        right_mask,
        rank: r,
        rho: pruning_ratio(region, stage, p, q),
    })
}

impl SparseLoraModule {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn left(&self) -> &Matrix {
        &self.left
    }

    pub fn right(&self) -> &Matrix {
        &self.right
    }

    pub fn left_mask(&self) -> Option<&Matrix> {
        self.left_mask.as_ref()
    }

    pub fn right_mask(&self) -> Option<&Matrix> {
        self.right_mask.as_ref()
    }

    /// Output rows of the materialized delta.
    pub fn out_dim(&self) -> usize {
        self.left.rows()
    }

    /// Input columns of the materialized delta.
    pub fn in_dim(&self) -> usize {
        self.right.cols()
    }

    /// In-place factor access for optimizer steps and rewinds.
    pub(crate) fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.left, &mut self.right)
    }

    /// Replaces both factors; shapes must match.
    pub fn set_factors(&mut self, left: Matrix, right: Matrix) -> Result<()> {
        if left.shape() != self.left.shape() || right.shape() != self.right.shape() {
            return Err(Error::contract("factor shapes must match the adapter"));
        }
        self.left = left;
        self.right = right;
        Ok(())
    }

    /// Installs unstructured 0/1 masks over both factors (magnitude-pruning
    /// support); `None` clears a side.
    pub fn set_unstructured_masks(
        &mut self,
        left_mask: Option<Matrix>,
        right_mask: Option<Matrix>,
        rho: f64,
    ) -> Result<()> {
        for (mask, shape) in [
            (left_mask.as_ref(), self.left.shape()),
            (right_mask.as_ref(), self.right.shape()),
        ] {
            if let Some(m) = mask {
                if m.shape() != shape {
                    return Err(Error::contract("mask shape must match its factor"));
                }
                if m.data().iter().any(|&b| b != 0.0 && b != 1.0) {
                    return Err(Error::contract("mask entries must be 0 or 1"));
                }
            }
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::contract(format!("pruning ratio {rho} outside [0, 1)")));
        }
        self.left_mask = left_mask;
        self.right_mask = right_mask;
        self.rho = rho;
        Ok(())
    }

    fn masked_left(&self) -> Matrix {
        match &self.left_mask {
            Some(m) => self.left.hadamard(m).expect("mask shape checked at install"),
            None => self.left.clone(),
        }
    }

    fn masked_right(&self) -> Matrix {
        match &self.right_mask {
            Some(m) => self.right.hadamard(m).expect("mask shape checked at install"),
            None => self.right.clone(),
        }
    }

    /// Materializes the `p x q` delta. Entries outside the constrained
    /// rows/columns are bitwise zero.
    pub fn effective_delta(&self) -> Matrix {
        self.masked_left()
            .matmul(&self.masked_right())
            .expect("factor shapes are construction-checked")
    }

    /// Records the delta applied to `x` on a tape, registering the factors
    /// as trainable or constant leaves. Returns the output node and the
    /// factor handles `(left, right)`.
    pub fn apply_taped(
        &self,
        tape: &mut Tape,
        x: TensorRef,
        trainable: bool,
    ) -> Result<(TensorRef, (TensorRef, TensorRef))> {
        let (left_ref, right_ref) = if trainable {
            (tape.trainable(self.left.clone()), tape.trainable(self.right.clone()))
        } else {
            (tape.constant(self.left.clone()), tape.constant(self.right.clone()))
        };
        let left_eff = match &self.left_mask {
            Some(m) => {
                let mask = tape.constant(m.clone());
                tape.elementwise_mul(left_ref, mask)?
            }
            None => left_ref,
        };
        let right_eff = match &self.right_mask {
            Some(m) => {
                let mask = tape.constant(m.clone());
                tape.elementwise_mul(right_ref, mask)?
            }
            None => right_ref,
        };
        let rx = tape.matmul(right_eff, x)?;
        let out = tape.matmul(left_eff, rx)?;
        Ok((out, (left_ref, right_ref)))
    }

    /// Active parameter count for the stage: masked-out rows/columns of
    /// the constrained factor do not count.
    pub fn count_trainable(&self) -> usize {
        let (p, r) = self.left.shape();
        let q = self.right.cols();
        match self.stage {
            Stage::Row => {
                let active_rows = match &self.left_mask {
                    Some(m) => (0..p).filter(|&i| m.get(i, 0) == 1.0).count(),
                    None => p,
                };
                active_rows * r + r * q
            }
            Stage::Column => {
                let active_cols = match &self.right_mask {
                    Some(m) => (0..q).filter(|&j| m.get(0, j) == 1.0).count(),
                    None => q,
                };
                p * r + r * active_cols
            }
            Stage::Dense => p * r + r * q,
        }
    }

    /// Saves `<prefix>_left.tsr`, `<prefix>_right.tsr`, and any masks.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        let dtype = tsr1::Dtype::F64;
        tsr1::write_matrix(&dir.join(format!("{prefix}_left.tsr")), &self.left, dtype)?;
        tsr1::write_matrix(&dir.join(format!("{prefix}_right.tsr")), &self.right, dtype)?;
        if let Some(m) = &self.left_mask {
            tsr1::write_matrix(&dir.join(format!("{prefix}_left_mask.tsr")), m, dtype)?;
        }
        if let Some(m) = &self.right_mask {
            tsr1::write_matrix(&dir.join(format!("{prefix}_right_mask.tsr")), m, dtype)?;
        }
        std::fs::write(
            dir.join(format!("{prefix}_meta.txt")),
            format!("stage {}\nrank {}\nrho {}\n", self.stage.as_str(), self.rank, self.rho),
        )
        .map_err(|e| Error::io("adapter meta", e))
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        let left = tsr1::read_matrix(&dir.join(format!("{prefix}_left.tsr")))?;
        let right = tsr1::read_matrix(&dir.join(format!("{prefix}_right.tsr")))?;
        let read_opt = |name: String| -> Result<Option<Matrix>> {
            let path = dir.join(name);
            if path.exists() {
                Ok(Some(tsr1::read_matrix(&path)?))
            } else {
                Ok(None)
            }
        };
        let left_mask = read_opt(format!("{prefix}_left_mask.tsr"))?;
        let right_mask = read_opt(format!("{prefix}_right_mask.tsr"))?;
        let meta_path = dir.join(format!("{prefix}_meta.txt"));
        let meta = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(&meta_path.display().to_string(), e))?;
        let mut stage = Stage::Dense;
        let mut rank = left.cols();
        let mut rho = 0.0;
        for (lineno, line) in meta.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let val = parts.next().unwrap_or("");
            match key {
                "stage" => {
                    stage = match val {
                        "row" => Stage::Row,
                        "column" => Stage::Column,
                        "dense" => Stage::Dense,
                        other => {
                            return Err(Error::Parse {
                                line: lineno + 1,
                                msg: format!("unknown stage `{other}`"),
                            })
                        }
                    }
                }
                "rank" => {
                    rank = val.parse().map_err(|_| Error::Parse {
                        line: lineno + 1,
                        msg: format!("bad rank `{val}`"),
                    })?
                }
                "rho" => {
                    rho = val.parse().map_err(|_| Error::Parse {
                        line: lineno + 1,
                        msg: format!("bad rho `{val}`"),
                    })?
                }
                "" => {}
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("unknown adapter meta key `{other}`"),
                    })
                }
            }
        }
        Ok(SparseLoraModule {
            left,
            right,
            stage,
            left_mask,
            right_mask,
            rank,
            rho,
        })
    }
}
