//! SGD and Adam over individual factor matrices.
//!
//! State is per-matrix. A masked entry whose gradient stays exactly zero
//! accumulates exactly zero moment, so its value never moves.

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamOptimizer {
    kind: OptimizerKind,
    lr: f64,
    t: usize,
    m: Matrix,
    v: Matrix,
}

impl ParamOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shape: (usize, usize)) -> Self {
        ParamOptimizer {
            kind,
            lr,
            t: 0,
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Exposed so tests can assert that masked entries keep zero state.
    pub fn state(&self) -> (&Matrix, &Matrix) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) {
        debug_assert_eq!(param.shape(), grad.shape());
        match self.kind {
            OptimizerKind::Sgd => {
                let p = param.data_mut();
                for (pv, &g) in p.iter_mut().zip(grad.data()) {
                    *pv -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                let m = self.m.data_mut();
                let v = self.v.data_mut();
                let p = param.data_mut();
                for i in 0..p.len() {
                    let g = grad.data()[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_linear_in_gradient() {
        let mut opt = ParamOptimizer::new(OptimizerKind::Sgd, 0.5, (1, 2));
        let mut p = Matrix::from_rows(&[&[1.0, -1.0]]).unwrap();
        let g = Matrix::from_rows(&[&[2.0, 4.0]]).unwrap();
        opt.step(&mut p, &g);
        assert_eq!(p.data(), &[0.0, -3.0]);
    }

    #[test]
    fn adam_zero_gradient_leaves_param_and_state_at_zero() {
        let mut opt = ParamOptimizer::new(OptimizerKind::Adam, 0.1, (1, 2));
        let mut p = Matrix::from_rows(&[&[0.0, 3.0]]).unwrap();
        let g = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        for _ in 0..10 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p.get(0, 0), 0.0);
        assert!(p.get(0, 1) < 3.0);
        let (m, v) = opt.state();
        assert_eq!(m.get(0, 0).to_bits(), 0);
        assert_eq!(v.get(0, 0).to_bits(), 0);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // With bias correction, the first Adam step is lr * g/|g| up to eps.
        let mut opt = ParamOptimizer::new(OptimizerKind::Adam, 0.01, (1, 1));
        let mut p = Matrix::from_rows(&[&[1.0]]).unwrap();
        let g = Matrix::from_rows(&[&[0.3]]).unwrap();
        opt.step(&mut p, &g);
        assert!((p.get(0, 0) - (1.0 - 0.01)).abs() < 1e-6);
    }
}
