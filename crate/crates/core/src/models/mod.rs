//! Tiny frozen-base networks with adapter injection points.
//!
//! Activations flow as `width x batch` matrices: one example per column,
//! matching `y = W x`. A layer's frozen weight is only ever changed by
//! merging a finished adapter's delta into it.

mod checkpoint;

pub use checkpoint::{load_model, save_model};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lora::SparseLoraModule;
use crate::rng;
use crate::tensor::{Matrix, Tape, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Gelu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::contract(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::SquaredError => "squared_error",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "squared_error" => Ok(LossKind::SquaredError),
            other => Err(Error::contract(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Which matrix of a layer a handle points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Main,
    Query,
    Key,
    Value,
}

impl Slot {
    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Main => "main",
            Slot::Query => "query",
            Slot::Key => "key",
            Slot::Value => "value",
        }
    }
}

/// Stable handle to one adaptable weight matrix in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TargetId {
    pub layer: usize,
    pub slot: Slot,
}

impl TargetId {
    pub fn main(layer: usize) -> Self {
        TargetId {
            layer,
            slot: Slot::Main,
        }
    }
}

impl std::fmt::Display for TargetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.layer, self.slot.as_str())
    }
}

/// Frozen weight matrix with an optional bias and an optional attached
/// adapter. The weight changes only through `merge_delta`.
#[derive(Debug, Clone)]
pub struct FrozenLinear {
    w0: Matrix,
    bias: Option<Matrix>, // p x 1
    adapter: Option<SparseLoraModule>,
}

impl FrozenLinear {
    pub fn new(w0: Matrix, bias: Option<Matrix>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.cols() != 1 || b.rows() != w0.rows() {
                return Err(Error::Shape {
                    op: "frozen_linear",
                    lhs: w0.shape(),
                    rhs: b.shape(),
                });
            }
        }
        Ok(FrozenLinear {
            w0,
            bias,
            adapter: None,
        })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn bias(&self) -> Option<&Matrix> {
        self.bias.as_ref()
    }

    pub fn adapter(&self) -> Option<&SparseLoraModule> {
        self.adapter.as_ref()
    }

    pub(crate) fn adapter_mut(&mut self) -> Option<&mut SparseLoraModule> {
        self.adapter.as_mut()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn attach_adapter(&mut self, module: SparseLoraModule) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::contract("adapter already attached"));
        }
        if module.out_dim() != self.out_dim() || module.in_dim() != self.in_dim() {
            return Err(Error::Shape {
                op: "attach_adapter",
                lhs: self.w0.shape(),
                rhs: (module.out_dim(), module.in_dim()),
            });
        }
        self.adapter = Some(module);
        Ok(())
    }

    pub fn detach_adapter(&mut self) -> Result<SparseLoraModule> {
        self.adapter
            .take()
            .ok_or_else(|| Error::contract("no adapter attached"))
    }

    /// Folds the adapter's materialized delta into the frozen weight and
    /// detaches it. Exact-zero delta entries are skipped so untouched
    /// weights keep their bit pattern.
    pub fn merge_delta(&mut self) -> Result<()> {
        let adapter = self.detach_adapter()?;
        self.merge_matrix(&adapter.effective_delta())
    }

    /// Adds an already-materialized delta into the frozen weight, skipping
    /// exact zeros.
    pub fn merge_matrix(&mut self, delta: &Matrix) -> Result<()> {
        if delta.shape() != self.w0.shape() {
            return Err(Error::Shape {
                op: "merge_delta",
                lhs: self.w0.shape(),
                rhs: delta.shape(),
            });
        }
        let (p, q) = self.w0.shape();
        for i in 0..p {
            for j in 0..q {
                let d = delta.get(i, j);
                if d != 0.0 {
                    self.w0.set(i, j, self.w0.get(i, j) + d);
                }
            }
        }
        Ok(())
    }
}

/// Single-head self-attention over the columns of the input, which are
/// treated as token positions. Square projections, no biases.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: FrozenLinear,
    pub wk: FrozenLinear,
    pub wv: FrozenLinear,
}

impl AttentionBlock {
    pub fn dim(&self) -> usize {
        self.wq.out_dim()
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear {
        lin: FrozenLinear,
        activation: Activation,
    },
    Attention(AttentionBlock),
}

/// What role tape leaves play during a taped forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    /// Everything is a constant.
    Eval,
    /// Adapter factors are trainable; frozen weights stay constant.
    TrainAdapters,
    /// One frozen weight is gradient-observable; nothing is trainable.
    ObserveWeight(TargetId),
}

/// Handles produced by a taped forward pass.
pub struct TapedRefs {
    pub output: TensorRef,
    /// `(target, left, right)` for each trainable adapter.
    pub adapters: Vec<(TargetId, TensorRef, TensorRef)>,
    pub observed: Option<TensorRef>,
}

/// Targets for one batch of examples.
#[derive(Debug, Clone)]
pub enum BatchTargets {
    /// Real-valued target matrix, `out_width x batch`.
    Real(Matrix),
    /// One class index per column.
    Class(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct TinyModel {
    layers: Vec<Layer>,
    loss: LossKind,
    adapter_targets: Vec<TargetId>,
}

impl TinyModel {
    /// Adapter targets default to every frozen matrix in the model.
    pub fn new(layers: Vec<Layer>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("a model needs at least one layer"));
        }
        let mut model = TinyModel {
            layers,
            loss,
            adapter_targets: Vec::new(),
        };
        model.adapter_targets = model.all_matrix_ids();
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn all_matrix_ids(&self) -> Vec<TargetId> {
        let mut ids = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { .. } => ids.push(TargetId::main(i)),
                Layer::Attention(_) => {
                    for slot in [Slot::Query, Slot::Key, Slot::Value] {
                        ids.push(TargetId { layer: i, slot });
                    }
                }
            }
        }
        ids
    }

    pub fn adapter_targets(&self) -> &[TargetId] {
        &self.adapter_targets
    }

    pub fn set_adapter_targets(&mut self, targets: Vec<TargetId>) -> Result<()> {
        for t in &targets {
            self.linear(*t)?;
        }
        self.adapter_targets = targets;
        Ok(())
    }

    pub fn linear(&self, id: TargetId) -> Result<&FrozenLinear> {
        let layer = self
            .layers
            .get(id.layer)
            .ok_or_else(|| Error::contract(format!("no layer {}", id.layer)))?;
        match (layer, id.slot) {
            (Layer::Linear { lin, .. }, Slot::Main) => Ok(lin),
            (Layer::Attention(att), Slot::Query) => Ok(&att.wq),
            (Layer::Attention(att), Slot::Key) => Ok(&att.wk),
            (Layer::Attention(att), Slot::Value) => Ok(&att.wv),
            _ => Err(Error::contract(format!("layer {} has no slot {}", id.layer, id.slot.as_str()))),
        }
    }

    pub fn linear_mut(&mut self, id: TargetId) -> Result<&mut FrozenLinear> {
        let layer = self
            .layers
            .get_mut(id.layer)
            .ok_or_else(|| Error::contract(format!("no layer {}", id.layer)))?;
        match (layer, id.slot) {
            (Layer::Linear { lin, .. }, Slot::Main) => Ok(lin),
            (Layer::Attention(att), Slot::Query) => Ok(&mut att.wq),
            (Layer::Attention(att), Slot::Key) => Ok(&mut att.wk),
            (Layer::Attention(att), Slot::Value) => Ok(&mut att.wv),
            _ => Err(Error::contract(format!("layer {} has no slot {}", id.layer, id.slot.as_str()))),
        }
    }

    pub fn weight(&self, id: TargetId) -> Result<&Matrix> {
        Ok(self.linear(id)?.w0())
    }

    pub fn attach_adapter(&mut self, id: TargetId, module: SparseLoraModule) -> Result<()> {
        self.linear_mut(id)?.attach_adapter(module)
    }

    pub fn merge_adapter(&mut self, id: TargetId) -> Result<()> {
        self.linear_mut(id)?.merge_delta()
    }

    pub fn detach_adapter(&mut self, id: TargetId) -> Result<SparseLoraModule> {
        self.linear_mut(id)?.detach_adapter()
    }

    pub fn has_adapter(&self, id: TargetId) -> bool {
        self.linear(id).map(|l| l.adapter().is_some()).unwrap_or(false)
    }

    pub fn input_width(&self) -> usize {
        match &self.layers[0] {
            Layer::Linear { lin, .. } => lin.in_dim(),
            Layer::Attention(att) => att.dim(),
        }
    }

    pub fn output_width(&self) -> usize {
        match self.layers.last().unwrap() {
            Layer::Linear { lin, .. } => lin.out_dim(),
            Layer::Attention(att) => att.dim(),
        }
    }

    /// Frozen parameter count: weights plus biases.
    pub fn param_count(&self) -> usize {
        let linear_params = |lin: &FrozenLinear| {
            lin.w0().len() + lin.bias().map(|b| b.len()).unwrap_or(0)
        };
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear { lin, .. } => linear_params(lin),
                Layer::Attention(att) => {
                    linear_params(&att.wq) + linear_params(&att.wk) + linear_params(&att.wv)
                }
            })
            .sum()
    }

    /// Pure evaluation forward pass; `x` is `input_width x batch`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x_ref = tape.constant(x.clone());
        let refs = self.forward_taped(&mut tape, x_ref, TapeMode::Eval)?;
        Ok(tape.value(refs.output).clone())
    }

    /// Records the full forward pass on `tape`, returning the output node
    /// plus the leaf handles the mode asked for.
    pub fn forward_taped(&self, tape: &mut Tape, x: TensorRef, mode: TapeMode) -> Result<TapedRefs> {
        if tape.value(x).rows() != self.input_width() {
            return Err(Error::Shape {
                op: "forward",
                lhs: (self.input_width(), 0),
                rhs: tape.value(x).shape(),
            });
        }
        let mut refs = TapedRefs {
            output: x,
            adapters: Vec::new(),
            observed: None,
        };
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { lin, activation } => {
                    h = self.linear_taped(lin, TargetId::main(i), tape, h, mode, &mut refs)?;
                    h = match activation {
                        Activation::None => h,
                        Activation::Relu => tape.relu(h)?,
                        Activation::Gelu => tape.gelu(h)?,
                    };
                }
                Layer::Attention(att) => {
                    let d = att.dim() as f64;
                    let q = self.linear_taped(
                        &att.wq,
                        TargetId { layer: i, slot: Slot::Query },
                        tape,
                        h,
                        mode,
                        &mut refs,
                    )?;
                    let k = self.linear_taped(
                        &att.wk,
                        TargetId { layer: i, slot: Slot::Key },
                        tape,
                        h,
                        mode,
                        &mut refs,
                    )?;
                    let v = self.linear_taped(
                        &att.wv,
                        TargetId { layer: i, slot: Slot::Value },
                        tape,
                        h,
                        mode,
                        &mut refs,
                    )?;
                    let qt = tape.transpose(q)?;
                    let scores = tape.matmul(qt, k)?;
                    let scaled = tape.scale(scores, 1.0 / d.sqrt())?;
                    let attn = tape.softmax_rows(scaled)?;
                    let attn_t = tape.transpose(attn)?;
                    h = tape.matmul(v, attn_t)?;
                }
            }
        }
        refs.output = h;
        Ok(refs)
    }

    fn linear_taped(
        &self,
        lin: &FrozenLinear,
        id: TargetId,
        tape: &mut Tape,
        x: TensorRef,
        mode: TapeMode,
        refs: &mut TapedRefs,
    ) -> Result<TensorRef> {
        let w0_ref = if mode == TapeMode::ObserveWeight(id) {
            let r = tape.observed(lin.w0().clone());
            refs.observed = Some(r);
            r
        } else {
            tape.constant(lin.w0().clone())
        };
        let mut out = tape.matmul(w0_ref, x)?;
        if let Some(adapter) = lin.adapter() {
            let trainable = mode == TapeMode::TrainAdapters;
            let (delta_out, (left, right)) = adapter.apply_taped(tape, x, trainable)?;
            if trainable {
                refs.adapters.push((id, left, right));
            }
            out = tape.add(out, delta_out)?;
        }
        if let Some(b) = lin.bias() {
            let b_ref = tape.constant(b.clone());
            out = tape.add_bias(out, b_ref)?;
        }
        Ok(out)
    }

    /// Applies the model's configured loss to an output node.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        output: TensorRef,
        targets: &BatchTargets,
    ) -> Result<TensorRef> {
        match (self.loss, targets) {
            (LossKind::SquaredError, BatchTargets::Real(t)) => tape.mse_loss(output, t),
            (LossKind::CrossEntropy, BatchTargets::Class(y)) => tape.cross_entropy(output, y),
            (LossKind::SquaredError, BatchTargets::Class(_)) => Err(Error::contract(
                "squared-error model given class targets",
            )),
            (LossKind::CrossEntropy, BatchTargets::Real(_)) => Err(Error::contract(
                "cross-entropy model given real-valued targets",
            )),
        }
    }
}

/// Stack of frozen linear layers: one per consecutive width pair, Gaussian
/// `N(0, 1/fan_in)` weights, zero biases, deterministic in the seed.
pub fn build_mlp(
    widths: &[usize],
    activation: Activation,
    loss: LossKind,
    seed: u64,
) -> Result<TinyModel> {
    if widths.len() < 2 {
        return Err(Error::contract("need at least input and output widths"));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::contract("layer widths must be positive"));
    }
    let n_layers = widths.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (q, p) = (widths[l], widths[l + 1]);
        let w0 = gaussian_matrix(p, q, rng::derive_seed(seed, l as u64));
        let bias = Matrix::zeros(p, 1);
        let act = if l + 1 == n_layers { Activation::None } else { activation };
        layers.push(Layer::Linear {
            lin: FrozenLinear::new(w0, Some(bias))?,
            activation: act,
        });
    }
    TinyModel::new(layers, loss)
}

/// Classifier-flavored convenience wrapper: hidden ReLU, cross-entropy.
pub fn build_tiny_classifier(widths: &[usize], seed: u64) -> Result<TinyModel> {
    build_mlp(widths, Activation::Relu, LossKind::CrossEntropy, seed)
}

/// Attention probe: one self-attention block followed by a linear head.
/// Input columns are token positions.
pub fn build_attention_probe(dim: usize, classes: usize, seed: u64) -> Result<TinyModel> {
    if dim == 0 || classes == 0 {
        return Err(Error::contract("attention probe needs positive dims"));
    }
    let proj = |salt: u64| -> Result<FrozenLinear> {
        FrozenLinear::new(gaussian_matrix(dim, dim, rng::derive_seed(seed, salt)), None)
    };
    let attention = AttentionBlock {
        wq: proj(101)?,
        wk: proj(102)?,
        wv: proj(103)?,
    };
    let head = FrozenLinear::new(
        gaussian_matrix(classes, dim, rng::derive_seed(seed, 104)),
        Some(Matrix::zeros(classes, 1)),
    )?;
    TinyModel::new(
        vec![
            Layer::Attention(attention),
            Layer::Linear {
                lin: head,
                activation: Activation::None,
            },
        ],
        LossKind::CrossEntropy,
    )
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let std = 1.0 / (cols as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    let mut rng = rng::rng_from(seed);
    Matrix::from_raw(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::CoreRegion;
    use crate::lora::{init_adapter, Stage};
    use crate::tensor::max_rel_err;

    fn planted_region(rows: Vec<usize>, cols: Vec<usize>) -> CoreRegion {
        CoreRegion::new(rows, cols, 0.1).unwrap()
    }

    #[test]
    fn zero_left_factor_means_base_output() {
        let mut model = build_mlp(&[3, 2], Activation::None, LossKind::SquaredError, 5).unwrap();
        let x = gaussian_matrix(3, 4, 99);
        let base = model.forward(&x).unwrap();
        let ad = init_adapter(2, 3, 1, Stage::Dense, &planted_region(vec![], vec![]), 8).unwrap();
        model.attach_adapter(TargetId::main(0), ad).unwrap();
        let adapted = model.forward(&x).unwrap();
        assert_eq!(base, adapted);
    }

    #[test]
    fn doubling_map_example() {
        // W0 = I2, delta = I2, x = [[1],[2]] -> [[2],[4]].
        let lin = FrozenLinear::new(Matrix::identity(2), None).unwrap();
        let mut model = TinyModel::new(
            vec![Layer::Linear { lin, activation: Activation::None }],
            LossKind::SquaredError,
        )
        .unwrap();
        let mut ad = init_adapter(2, 2, 2, Stage::Dense, &planted_region(vec![], vec![]), 3).unwrap();
        ad.set_factors(Matrix::identity(2), Matrix::identity(2)).unwrap();
        model.attach_adapter(TargetId::main(0), ad).unwrap();
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap();
        let y = model.forward(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn forward_matches_materialized_delta() {
        let mut model = build_mlp(&[5, 4], Activation::None, LossKind::SquaredError, 11).unwrap();
        let mut ad = init_adapter(4, 5, 2, Stage::Dense, &planted_region(vec![], vec![]), 12).unwrap();
        ad.set_factors(gaussian_matrix(4, 2, 13), gaussian_matrix(2, 5, 14)).unwrap();
        let delta = ad.effective_delta();
        model.attach_adapter(TargetId::main(0), ad).unwrap();
        let x = gaussian_matrix(5, 6, 15);
        let got = model.forward(&x).unwrap();
        let w0 = model.weight(TargetId::main(0)).unwrap();
        let want = w0.matmul(&x).unwrap().add(&delta.matmul(&x).unwrap()).unwrap();
        assert!(max_rel_err(&got, &want) <= 1e-12);
    }

    #[test]
    fn merge_with_zero_factors_keeps_w0_bitwise() {
        let mut model = build_mlp(&[3, 3], Activation::None, LossKind::SquaredError, 21).unwrap();
        let before = model.weight(TargetId::main(0)).unwrap().clone();
        let ad = init_adapter(3, 3, 1, Stage::Dense, &planted_region(vec![], vec![]), 22).unwrap();
        model.attach_adapter(TargetId::main(0), ad).unwrap();
        model.merge_adapter(TargetId::main(0)).unwrap();
        let after = model.weight(TargetId::main(0)).unwrap();
        assert_eq!(before.data(), after.data());
        assert!(!model.has_adapter(TargetId::main(0)));
    }

    #[test]
    fn merge_preserves_forward_on_random_inputs() {
        let mut model = build_mlp(&[4, 4], Activation::None, LossKind::SquaredError, 31).unwrap();
        let mut ad = init_adapter(4, 4, 1, Stage::Row, &planted_region(vec![1, 2], vec![]), 32).unwrap();
        ad.set_factors(gaussian_matrix(4, 1, 33), gaussian_matrix(1, 4, 34)).unwrap();
        model.attach_adapter(TargetId::main(0), ad).unwrap();
        let mut outputs = Vec::new();
        let mut inputs = Vec::new();
        for t in 0..20 {
            let x = gaussian_matrix(4, 2, 100 + t);
            outputs.push(model.forward(&x).unwrap());
            inputs.push(x);
        }
        model.merge_adapter(TargetId::main(0)).unwrap();
        for (x, before) in inputs.iter().zip(&outputs) {
            let after = model.forward(x).unwrap();
            assert!(max_rel_err(&after, before) <= 1e-10);
        }
    }

    #[test]
    fn row_stage_merge_leaves_other_rows_untouched() {
        let mut model = build_mlp(&[4, 4], Activation::None, LossKind::SquaredError, 41).unwrap();
        let before = model.weight(TargetId::main(0)).unwrap().clone();
        let mut ad = init_adapter(4, 4, 1, Stage::Row, &planted_region(vec![0, 3], vec![]), 42).unwrap();
        ad.set_factors(Matrix::filled(4, 1, 0.7), gaussian_matrix(1, 4, 43)).unwrap();
        model.attach_adapter(TargetId::main(0), ad).unwrap();
        model.merge_adapter(TargetId::main(0)).unwrap();
        let after = model.weight(TargetId::main(0)).unwrap();
        for i in [1usize, 2] {
            for j in 0..4 {
                assert_eq!(after.get(i, j).to_bits(), before.get(i, j).to_bits());
            }
        }
        assert_ne!(after.get(0, 0), before.get(0, 0));
    }

    #[test]
    fn merge_without_adapter_is_contract_error() {
        let mut model = build_mlp(&[2, 2], Activation::None, LossKind::SquaredError, 51).unwrap();
        assert!(matches!(
            model.merge_adapter(TargetId::main(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn builder_is_deterministic_and_shapes_match() {
        let a = build_tiny_classifier(&[8, 16, 4], 7).unwrap();
        let b = build_tiny_classifier(&[8, 16, 4], 7).unwrap();
        let ids = a.all_matrix_ids();
        assert_eq!(ids.len(), 2);
        for id in &ids {
            assert_eq!(a.weight(*id).unwrap().data(), b.weight(*id).unwrap().data());
        }
        assert_eq!(a.weight(TargetId::main(0)).unwrap().shape(), (16, 8));
        assert_eq!(a.weight(TargetId::main(1)).unwrap().shape(), (4, 16));
        // Parameter count: sum of p*q + p over layers with bias.
        assert_eq!(a.param_count(), 16 * 8 + 16 + 4 * 16 + 4);
    }

    #[test]
    fn builder_rejects_degenerate_widths() {
        assert!(build_tiny_classifier(&[], 1).is_err());
        assert!(build_tiny_classifier(&[4], 1).is_err());
        assert!(build_tiny_classifier(&[4, 0, 2], 1).is_err());
    }

    #[test]
    fn forward_shape_error_names_shapes() {
        let model = build_mlp(&[3, 2], Activation::None, LossKind::SquaredError, 61).unwrap();
        let x = Matrix::zeros(4, 1);
        assert!(matches!(model.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn attention_probe_runs_and_mixes_tokens() {
        let model = build_attention_probe(4, 3, 71).unwrap();
        let x = gaussian_matrix(4, 5, 72);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), (3, 5));
        assert_eq!(model.all_matrix_ids().len(), 4);
    }
}
