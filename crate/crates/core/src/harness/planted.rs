//! Synthetic teacher-student tasks with a known perturbation support.
//!
//! A planted task hides a perturbation `delta_star` with a chosen
//! row/column support inside one layer of a frozen base model. The
//! teacher is `base + delta_star`; inputs are seeded Gaussians; targets
//! come from the teacher. Because the support is known, region-selection
//! quality can be judged against ground truth.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::models::{build_mlp, Activation, BatchTargets, LossKind, TargetId, TinyModel};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Matrix;
use crate::train::{Batches, EvalData, MetricKind};

#[derive(Debug, Clone, PartialEq)]
pub enum SupportSpec {
    /// Rank-1 perturbation confined to the given rows.
    Rows(Vec<usize>),
    /// Rank-1 perturbation confined to the given columns.
    Cols(Vec<usize>),
    /// Sum of a row-supported and a column-supported rank-1 arm.
    Cross { rows: Vec<usize>, cols: Vec<usize> },
    /// Dense rank-`r` perturbation.
    LowRank(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// Targets are the teacher's real-valued outputs (plus noise).
    Real,
    /// Targets are the teacher's argmax class (noise flips labels).
    Argmax,
}

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Which layer hides the perturbation.
    pub target_layer: usize,
    pub support: SupportSpec,
    /// Scale of the strongest support entry.
    pub amplitude: f64,
    /// Geometric falloff of successive support rows/columns; 1.0 = flat.
    pub decay: f64,
    pub train_examples: usize,
    pub eval_examples: usize,
    /// Target noise std (`Real`) or label flip probability (`Argmax`).
    pub noise: f64,
    pub label_kind: LabelKind,
    pub metric: MetricKind,
    /// Restrict adapters to these layers; `None` adapts every layer.
    pub adapter_layers: Option<Vec<usize>>,
    pub seed: u64,
    /// Frozen-base seed override, so several tasks can share one base
    /// while drawing distinct perturbations and data from `seed`.
    pub base_seed: Option<u64>,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            widths: vec![32, 32],
            activation: Activation::None,
            target_layer: 0,
            support: SupportSpec::Cross {
                rows: vec![3, 11, 27],
                cols: vec![5, 14, 30],
            },
            amplitude: 2.5,
            decay: 0.5,
            train_examples: 512,
            eval_examples: 256,
            noise: 0.0,
            label_kind: LabelKind::Real,
            metric: MetricKind::Accuracy,
            adapter_layers: None,
            seed: 0,
            base_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTask {
    base: TinyModel,
    teacher: TinyModel,
    delta_star: Matrix,
    target: TargetId,
    train_inputs: Matrix,
    train_targets: BatchTargets,
    eval: EvalData,
}

impl PlantedTask {
    /// Fresh copy of the frozen base, ready for adapter training.
    pub fn model(&self) -> TinyModel {
        self.base.clone()
    }

    pub fn teacher(&self) -> &TinyModel {
        &self.teacher
    }

    pub fn delta_star(&self) -> &Matrix {
        &self.delta_star
    }

    pub fn target(&self) -> TargetId {
        self.target
    }

    pub fn eval_data(&self) -> &EvalData {
        &self.eval
    }

    pub fn train_examples(&self) -> usize {
        self.train_inputs.cols()
    }

    /// Slices the training split into column batches in deterministic order.
    pub fn train_batches(&self, batch_size: usize) -> Batches {
        slice_batches(&self.train_inputs, &self.train_targets, batch_size)
    }
}

/// Cuts `inputs` (width x n) and aligned targets into batches of at most
/// `batch_size` columns.
pub fn slice_batches(inputs: &Matrix, targets: &BatchTargets, batch_size: usize) -> Batches {
    let n = inputs.cols();
    let bs = batch_size.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        out.push((
            slice_cols(inputs, start, end),
            match targets {
                BatchTargets::Real(t) => BatchTargets::Real(slice_cols(t, start, end)),
                BatchTargets::Class(y) => BatchTargets::Class(y[start..end].to_vec()),
            },
        ));
        start = end;
    }
    out
}

fn slice_cols(m: &Matrix, start: usize, end: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), end - start);
    for i in 0..m.rows() {
        for j in start..end {
            out.set(i, j - start, m.get(i, j));
        }
    }
    out
}

/// Unit-norm Gaussian vector.
fn unit_vector(len: usize, seed: u64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = rng_from(seed);
    let mut v: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Support-confined arm weights: `amplitude * decay^i` with random sign,
/// placed at the given indices.
fn arm_vector(len: usize, indices: &[usize], amplitude: f64, decay: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let mut v = vec![0.0; len];
    for (i, &idx) in indices.iter().enumerate() {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        v[idx] = sign * amplitude * decay.powi(i as i32);
    }
    v
}

fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, &a) in u.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (j, &b) in v.iter().enumerate() {
            m.set(i, j, a * b);
        }
    }
    m
}

fn build_delta_star(p: usize, q: usize, spec: &PlantedSpec) -> Result<Matrix> {
    let check = |indices: &[usize], bound: usize, what: &str| -> Result<()> {
        if indices.iter().any(|&i| i >= bound) {
            return Err(Error::contract(format!(
                "planted {what} index out of range for a {p}x{q} layer"
            )));
        }
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract(format!("planted {what} indices must be unique")));
        }
        Ok(())
    };
    let seed = derive_seed(spec.seed, 0xde17a);
    match &spec.support {
        SupportSpec::Rows(rows) => {
            check(rows, p, "row")?;
            let u = arm_vector(p, rows, spec.amplitude, spec.decay, derive_seed(seed, 1));
            let v = unit_vector(q, derive_seed(seed, 2));
            Ok(outer(&u, &v))
        }
        SupportSpec::Cols(cols) => {
            check(cols, q, "column")?;
            let s = unit_vector(p, derive_seed(seed, 3));
            let t = arm_vector(q, cols, spec.amplitude, spec.decay, derive_seed(seed, 4));
            Ok(outer(&s, &t))
        }
        SupportSpec::Cross { rows, cols } => {
            check(rows, p, "row")?;
            check(cols, q, "column")?;
            let u = arm_vector(p, rows, spec.amplitude, spec.decay, derive_seed(seed, 1));
            let v = unit_vector(q, derive_seed(seed, 2));
            let s = unit_vector(p, derive_seed(seed, 3));
            let t = arm_vector(q, cols, spec.amplitude, spec.decay, derive_seed(seed, 4));
            outer(&u, &v).add(&outer(&s, &t))
        }
        SupportSpec::LowRank(r) => {
            if *r == 0 || *r > p.min(q) {
                return Err(Error::contract(format!("planted rank {r} invalid for {p}x{q}")));
            }
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut rng = rng_from(derive_seed(seed, 5));
            let b = Matrix::from_raw(p, *r, (0..p * r).map(|_| normal.sample(&mut rng)).collect());
            let a = Matrix::from_raw(*r, q, (0..r * q).map(|_| normal.sample(&mut rng)).collect());
            Ok(b.matmul(&a)?.scale(spec.amplitude / (*r as f64 * q as f64).sqrt()))
        }
    }
}

pub fn generate_planted_task(spec: &PlantedSpec) -> Result<PlantedTask> {
    if spec.train_examples == 0 || spec.eval_examples == 0 {
        return Err(Error::contract("planted task needs train and eval examples"));
    }
    let loss = match spec.label_kind {
        LabelKind::Real => LossKind::SquaredError,
        LabelKind::Argmax => LossKind::CrossEntropy,
    };
    let mut base = build_mlp(
        &spec.widths,
        spec.activation,
        loss,
        derive_seed(spec.base_seed.unwrap_or(spec.seed), 0xba5e),
    )?;
    if let Some(layers) = &spec.adapter_layers {
        let targets = layers.iter().map(|&l| TargetId::main(l)).collect();
        base.set_adapter_targets(targets)?;
    }
    let target = TargetId::main(spec.target_layer);
    let (p, q) = base.weight(target).map_err(|_| {
        Error::contract(format!("target layer {} does not exist", spec.target_layer))
    })?.shape();

    let delta_star = build_delta_star(p, q, spec)?;
    let mut teacher = base.clone();
    teacher.linear_mut(target)?.merge_matrix(&delta_star)?;

    // Disjoint train/eval splits from one Gaussian stream.
    let width = base.input_width();
    let total = spec.train_examples + spec.eval_examples;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = rng_from(derive_seed(spec.seed, 0xda7a));
    let inputs = Matrix::from_raw(
        width,
        total,
        {
            // Column-major draw so each example is a contiguous block of draws.
            let mut data = vec![0.0; width * total];
            for j in 0..total {
                for i in 0..width {
                    data[i * total + j] = normal.sample(&mut rng);
                }
            }
            data
        },
    );
    let train_inputs = slice_cols(&inputs, 0, spec.train_examples);
    let eval_inputs = slice_cols(&inputs, spec.train_examples, total);

    let train_out = teacher.forward(&train_inputs)?;
    let eval_out = teacher.forward(&eval_inputs)?;

    let mut noise_rng = rng_from(derive_seed(spec.seed, 0x9015e));
    let train_targets = match spec.label_kind {
        LabelKind::Real => {
            let noisy = if spec.noise > 0.0 {
                let normal = Normal::new(0.0, spec.noise).unwrap();
                let mut data = train_out.data().to_vec();
                for v in data.iter_mut() {
                    *v += normal.sample(&mut noise_rng);
                }
                Matrix::from_raw(train_out.rows(), train_out.cols(), data)
            } else {
                train_out
            };
            BatchTargets::Real(noisy)
        }
        LabelKind::Argmax => {
            let classes = teacher.output_width();
            let mut labels = Vec::with_capacity(train_inputs.cols());
            for j in 0..train_inputs.cols() {
                let mut y = argmax_col(&train_out, j);
                if spec.noise > 0.0 && noise_rng.gen_bool(spec.noise) {
                    y = noise_rng.gen_range(0..classes);
                }
                labels.push(y);
            }
            BatchTargets::Class(labels)
        }
    };

    // Eval targets are always clean teacher outputs.
    let eval_targets = match spec.label_kind {
        LabelKind::Real => BatchTargets::Real(eval_out),
        LabelKind::Argmax => BatchTargets::Class(
            (0..eval_inputs.cols()).map(|j| argmax_col(&eval_out, j)).collect(),
        ),
    };

    Ok(PlantedTask {
        base,
        teacher,
        delta_star,
        target,
        train_inputs,
        train_targets,
        eval: EvalData {
            inputs: eval_inputs,
            targets: eval_targets,
            metric: spec.metric,
        },
    })
}

fn argmax_col(m: &Matrix, j: usize) -> usize {
    let mut best = 0usize;
    let mut best_v = m.get(0, j);
    for i in 1..m.rows() {
        if m.get(i, j) > best_v {
            best_v = m.get(i, j);
            best = i;
        }
    }
    best
}
