//! Single-use reverse-mode gradient tape over [`Matrix`] values.
//!
//! Operations are recorded in execution order, which is already a
//! topological order, so the backward sweep is one reverse scan that
//! visits each node exactly once. Leaves come in three kinds:
//!
//! - `Trainable`: gradient materialized, meant for optimizer updates.
//! - `Observed`: gradient materialized but the tensor is not trained.
//!   Used when scoring frozen base weights.
//! - `Constant`: no gradient buffer is ever allocated.
//!
//! A tape is consumed by `backward`; recording or differentiating after
//! that is a contract error. Gradients are accumulated into zero-filled
//! buffers, so positions multiplied by an exact 0.0 mask come out as
//! bitwise +0.0.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Trainable,
    Observed,
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    /// Adds a `p x 1` bias node to every column of a `p x n` node.
    AddBias(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Relu(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    /// Squared error against a constant target: sum over rows, mean over
    /// batch columns.
    MseLoss(usize, Matrix),
    /// Row-stabilized softmax cross-entropy against one class label per
    /// column; mean over columns.
    CrossEntropy(usize, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by the tape handles of gradient-carrying leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, t: TensorRef) -> Option<&Matrix> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: TensorRef) -> Option<Matrix> {
        self.grads.get_mut(t.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trainable(&mut self, value: Matrix) -> TensorRef {
        self.push_leaf(value, LeafKind::Trainable)
    }

    pub fn observed(&mut self, value: Matrix) -> TensorRef {
        self.push_leaf(value, LeafKind::Observed)
    }

    pub fn constant(&mut self, value: Matrix) -> TensorRef {
        self.push_leaf(value, LeafKind::Constant)
    }

    pub fn value(&self, t: TensorRef) -> &Matrix {
        &self.nodes[t.0].value
    }

    fn push_leaf(&mut self, value: Matrix, kind: LeafKind) -> TensorRef {
        let requires_grad = kind != LeafKind::Constant;
        self.push(value, Op::Leaf(kind), requires_grad)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::contract("tape already consumed by backward"))
        } else {
            Ok(())
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn elementwise_mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Hadamard(a.0, b.0), rg))
    }

    /// `x + bias` where `bias` is `p x 1` and broadcast across columns.
    pub fn add_bias(&mut self, x: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.cols() != 1 || bv.rows() != xv.rows() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let (p, n) = xv.shape();
        let mut out = xv.data().to_vec();
        for i in 0..p {
            let b = bv.get(i, 0);
            for j in 0..n {
                out[i * n + j] += b;
            }
        }
        let rg = self.needs_grad(&[x.0, bias.0]);
        Ok(self.push(Matrix::from_raw(p, n, out), Op::AddBias(x.0, bias.0), rg))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        self.check_live()?;
        if !c.is_finite() {
            return Err(Error::numeric(format!("scale factor {c} is not finite")));
        }
        let value = self.nodes[a.0].value.scale(c);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(value, Op::Scale(a.0, c), rg))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = self.nodes[a.0].value.transpose();
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(value, Op::Relu(a.0), rg))
    }

    pub fn gelu(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = self.nodes[a.0].value.map(gelu);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(value, Op::Gelu(a.0), rg))
    }

    /// Softmax along each row, numerically stabilized.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let v = &self.nodes[a.0].value;
        let (r, c) = v.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&v.data()[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(Matrix::from_raw(r, c, out), Op::SoftmaxRows(a.0), rg))
    }

    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let value = Matrix::from_raw(1, 1, vec![self.nodes[a.0].value.sum()]);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(value, Op::Sum(a.0), rg))
    }

    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_live()?;
        let v = &self.nodes[a.0].value;
        let value = Matrix::from_raw(1, 1, vec![v.sum() / v.len() as f64]);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(value, Op::Mean(a.0), rg))
    }

    /// Squared-error loss against a constant target: per-column sum of
    /// squares, averaged over columns.
    pub fn mse_loss(&mut self, pred: TensorRef, target: &Matrix) -> Result<TensorRef> {
        self.check_live()?;
        let p = &self.nodes[pred.0].value;
        if p.shape() != target.shape() {
            return Err(Error::Shape {
                op: "mse_loss",
                lhs: p.shape(),
                rhs: target.shape(),
            });
        }
        let n = p.cols() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(
            Matrix::from_raw(1, 1, vec![loss]),
            Op::MseLoss(pred.0, target.clone()),
            rg,
        ))
    }

    /// Cross-entropy of column logits against one class index per column;
    /// mean over columns.
    pub fn cross_entropy(&mut self, logits: TensorRef, labels: &[usize]) -> Result<TensorRef> {
        self.check_live()?;
        let z = &self.nodes[logits.0].value;
        let (classes, n) = z.shape();
        if labels.len() != n {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for {} columns",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let mut total = 0.0;
        for j in 0..n {
            let col: Vec<f64> = (0..classes).map(|i| z.get(i, j)).collect();
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - col[labels[j]];
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Matrix::from_raw(1, 1, vec![total / n as f64]),
            Op::CrossEntropy(logits.0, labels.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss node. Consumes the tape: any
    /// further recording or a second backward is a contract error.
    pub fn backward(&mut self, loss: TensorRef) -> Result<Gradients> {
        self.check_live()?;
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = self.nodes.iter().map(|_| None).collect();
        // Pre-seed zero buffers for every gradient-carrying leaf so a loss
        // that never touches a trainable tensor still reports exact zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(LeafKind::Trainable | LeafKind::Observed) = node.op {
                grads[i] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        if self.nodes[loss.0].requires_grad {
            accumulate(&mut grads[loss.0], &Matrix::from_raw(1, 1, vec![1.0]), (1, 1));
        }

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf(_)) {
                grads[idx] = Some(g);
            }
        }

        // Drop buffers of interior nodes; only leaf gradients survive.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf(LeafKind::Trainable | LeafKind::Observed)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = g.matmul(&bv.transpose())?;
                    accumulate(&mut grads[*a], &da, av.shape());
                }
                if self.nodes[*b].requires_grad {
                    let db = av.transpose().matmul(g)?;
                    accumulate(&mut grads[*b], &db, bv.shape());
                }
            }
            Op::Add(a, b) => {
                for &src in [a, b].iter() {
                    if self.nodes[*src].requires_grad {
                        accumulate(&mut grads[*src], g, self.nodes[*src].value.shape());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], g, self.nodes[*a].value.shape());
                }
                if self.nodes[*b].requires_grad {
                    accumulate(&mut grads[*b], &g.scale(-1.0), self.nodes[*b].value.shape());
                }
            }
            Op::Hadamard(a, b) => {
                if self.nodes[*a].requires_grad {
                    let da = g.hadamard(&self.nodes[*b].value)?;
                    accumulate(&mut grads[*a], &da, self.nodes[*a].value.shape());
                }
                if self.nodes[*b].requires_grad {
                    let db = g.hadamard(&self.nodes[*a].value)?;
                    accumulate(&mut grads[*b], &db, self.nodes[*b].value.shape());
                }
            }
            Op::AddBias(x, bias) => {
                if self.nodes[*x].requires_grad {
                    accumulate(&mut grads[*x], g, self.nodes[*x].value.shape());
                }
                if self.nodes[*bias].requires_grad {
                    let (p, n) = g.shape();
                    let mut db = vec![0.0; p];
                    for i in 0..p {
                        for j in 0..n {
                            db[i] += g.get(i, j);
                        }
                    }
                    accumulate(&mut grads[*bias], &Matrix::from_raw(p, 1, db), (p, 1));
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], &g.scale(*c), self.nodes[*a].value.shape());
                }
            }
            Op::Transpose(a) => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], &g.transpose(), self.nodes[*a].value.shape());
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].requires_grad {
                    let av = &self.nodes[*a].value;
                    let da = Matrix::from_raw(
                        av.rows(),
                        av.cols(),
                        av.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads[*a], &da, av.shape());
                }
            }
            Op::Gelu(a) => {
                if self.nodes[*a].requires_grad {
                    let av = &self.nodes[*a].value;
                    let da = Matrix::from_raw(
                        av.rows(),
                        av.cols(),
                        av.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gv)| gv * gelu_deriv(x))
                            .collect(),
                    );
                    accumulate(&mut grads[*a], &da, av.shape());
                }
            }
            Op::SoftmaxRows(a) => {
                if self.nodes[*a].requires_grad {
                    let s = &node.value;
                    let (r, c) = s.shape();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let srow = &s.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..c {
                            da[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(
                        &mut grads[*a],
                        &Matrix::from_raw(r, c, da),
                        self.nodes[*a].value.shape(),
                    );
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].requires_grad {
                    let av = &self.nodes[*a].value;
                    let da = Matrix::filled(av.rows(), av.cols(), g.get(0, 0));
                    accumulate(&mut grads[*a], &da, av.shape());
                }
            }
            Op::Mean(a) => {
                if self.nodes[*a].requires_grad {
                    let av = &self.nodes[*a].value;
                    let da = Matrix::filled(av.rows(), av.cols(), g.get(0, 0) / av.len() as f64);
                    accumulate(&mut grads[*a], &da, av.shape());
                }
            }
            Op::MseLoss(pred, target) => {
                if self.nodes[*pred].requires_grad {
                    let pv = &self.nodes[*pred].value;
                    let n = pv.cols() as f64;
                    let c = 2.0 * g.get(0, 0) / n;
                    let da = Matrix::from_raw(
                        pv.rows(),
                        pv.cols(),
                        pv.data()
                            .iter()
                            .zip(target.data())
                            .map(|(&p, &t)| c * (p - t))
                            .collect(),
                    );
                    accumulate(&mut grads[*pred], &da, pv.shape());
                }
            }
            Op::CrossEntropy(logits, labels) => {
                if self.nodes[*logits].requires_grad {
                    let z = &self.nodes[*logits].value;
                    let (classes, n) = z.shape();
                    let c = g.get(0, 0) / n as f64;
                    let mut da = vec![0.0; classes * n];
                    let mut col = vec![0.0; classes];
                    let mut soft = vec![0.0; classes];
                    for j in 0..n {
                        for i in 0..classes {
                            col[i] = z.get(i, j);
                        }
                        softmax_into(&col, &mut soft);
                        for i in 0..classes {
                            let ind = if i == labels[j] { 1.0 } else { 0.0 };
                            da[i * n + j] = c * (soft[i] - ind);
                        }
                    }
                    accumulate(&mut grads[*logits], &Matrix::from_raw(classes, n, da), z.shape());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Matrix>, contribution: &Matrix, shape: (usize, usize)) {
    debug_assert_eq!(contribution.shape(), shape);
    let buf = slot.get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
    let dst = buf.data_mut();
    for (d, &s) in dst.iter_mut().zip(contribution.data()) {
        *d += s;
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // L = sum(W .* W) at W = [[1, -2]] has gradient [[2, -4]].
        let mut tape = Tape::new();
        let w = tape.trainable(Matrix::from_rows(&[&[1.0, -2.0]]).unwrap());
        let sq = tape.elementwise_mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_trainable_gets_exact_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.trainable(Matrix::from_rows(&[&[1.0, 2.0]]).unwrap());
        let c = tape.constant(Matrix::from_rows(&[&[5.0]]).unwrap());
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        assert!(gw.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn annihilating_mask_zeroes_value_and_gradient() {
        let mut tape = Tape::new();
        let a = tape.trainable(Matrix::from_rows(&[&[1.5, -2.5]]).unwrap());
        let mask = tape.constant(Matrix::zeros(1, 2));
        let masked = tape.elementwise_mul(a, mask).unwrap();
        assert!(tape.value(masked).data().iter().all(|&v| v == 0.0));
        let sq = tape.elementwise_mul(masked, masked).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn masked_positions_have_bitwise_zero_gradient() {
        // Mask [[1,0],[0,1]]: gradient at the zero positions must be +0.0
        // bit for bit, even when the upstream gradient is negative there.
        let mut tape = Tape::new();
        let a = tape.trainable(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let mask = tape.constant(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let masked = tape.elementwise_mul(a, mask).unwrap();
        let weight = tape.constant(Matrix::from_rows(&[&[-3.0, -5.0], &[-7.0, -11.0]]).unwrap());
        let weighted = tape.elementwise_mul(masked, weight).unwrap();
        let loss = tape.sum(weighted).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(a).unwrap();
        assert_eq!(g.get(0, 0), -3.0);
        assert_eq!(g.get(1, 1), -11.0);
        assert_eq!(g.get(0, 1).to_bits(), 0);
        assert_eq!(g.get(1, 0).to_bits(), 0);
    }

    #[test]
    fn identity_mask_is_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let ones = tape.constant(Matrix::filled(2, 2, 1.0));
        let out = tape.elementwise_mul(a, ones).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn backward_twice_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.trainable(Matrix::from_rows(&[&[1.0]]).unwrap());
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.trainable(Matrix::from_rows(&[&[1.0, 2.0]]).unwrap());
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn recording_after_backward_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.trainable(Matrix::from_rows(&[&[1.0]]).unwrap());
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.sum(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_leaves_never_materialize_gradients() {
        let mut tape = Tape::new();
        let w = tape.trainable(Matrix::from_rows(&[&[2.0]]).unwrap());
        let c = tape.constant(Matrix::from_rows(&[&[3.0]]).unwrap());
        let prod = tape.elementwise_mul(w, c).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().get(0, 0), 3.0);
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Two columns, logits chosen so softmax is easy to verify.
        let mut tape = Tape::new();
        let z = tape.trainable(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let loss = tape.cross_entropy(z, &[0, 0]).unwrap();
        // col 0: lse = ln(e^1 + e^0), loss0 = lse - 1; col 1: loss1 = lse - 0.
        let lse = (1f64.exp() + 1.0).ln();
        let want = ((lse - 1.0) + lse) / 2.0;
        assert!((tape.value(loss).get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn mse_is_mean_over_columns_of_row_sums() {
        let mut tape = Tape::new();
        let p = tape.trainable(Matrix::from_rows(&[&[1.0, 0.0], &[2.0, 0.0]]).unwrap());
        let target = Matrix::zeros(2, 2);
        let loss = tape.mse_loss(p, &target).unwrap();
        // col 0 contributes 1 + 4, col 1 contributes 0; mean over 2 cols.
        assert_eq!(tape.value(loss).get(0, 0), 2.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().get(1, 0), 2.0);
    }

    #[test]
    fn matvec_association_through_tape() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = tape.constant(Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap());
        let x = tape.constant(Matrix::from_rows(&[&[1.0], &[-1.0]]).unwrap());
        let ab = tape.matmul(a, b).unwrap();
        let left = tape.matmul(ab, x).unwrap();
        let bx = tape.matmul(b, x).unwrap();
        let right = tape.matmul(a, bx).unwrap();
        let d = tape.value(left).max_abs_diff(tape.value(right));
        assert!(d <= 1e-12);
    }
}
