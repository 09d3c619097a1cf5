//! Stage training and the full importance-guided fine-tuning pipeline.
//!
//! One round per pipeline pass: score importance on the current frozen
//! weights, cut core regions, then run a row-masked stage and a
//! column-masked stage, merging each stage's delta before the next starts.
//! Learning rates are scaled per target by `sqrt(1/(1-rho))` when enabled.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{
    density, gradient_scores, select_core_region, sensitivity_scores, CoreRegion, GradAggregation,
    ImportanceMap,
};
use crate::lora::{init_adapter, scaled_lr, Stage};
use crate::models::{BatchTargets, TapeMode, TargetId, TinyModel};
use crate::optim::{OptimizerKind, ParamOptimizer};
use crate::report::{RoundReport, RunReport, StageReport, TargetStage};
use crate::rng::derive_seed;
use crate::tensor::{Matrix, Tape};

/// `(inputs, targets)` minibatches; inputs are `width x batch`.
pub type Batches = Vec<(Matrix, BatchTargets)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceKind {
    Sensitivity,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Mse,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mse => "mse",
        }
    }
}

/// Held-out split plus the metric to report on it.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub inputs: Matrix,
    pub targets: BatchTargets,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Adapter rank; the structured pipeline uses 1.
    pub rank: usize,
    /// Retained fraction for the importance mask.
    pub k: f64,
    /// Retained fraction of the joint row+column density list.
    pub p_fraction: f64,
    /// Pipeline passes (importance -> row stage -> column stage).
    pub rounds: usize,
    pub lr_scaling_enabled: bool,
    /// Recompute importance and regions at the start of every round;
    /// when false, round 1 regions are reused.
    pub recompute_regions: bool,
    pub importance_kind: ImportanceKind,
    pub grad_aggregation: GradAggregation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-5,
            epochs: 3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            rank: 1,
            k: 0.05,
            p_fraction: 0.10,
            rounds: 1,
            lr_scaling_enabled: true,
            recompute_regions: true,
            importance_kind: ImportanceKind::Sensitivity,
            grad_aggregation: GradAggregation::MeanGradient,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::contract("base_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::contract("rank must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(Error::contract("rounds must be >= 1"));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::contract(format!("k {} outside (0, 1]", self.k)));
        }
        if !(self.p_fraction > 0.0 && self.p_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "p_fraction {} outside (0, 1]",
                self.p_fraction
            )));
        }
        Ok(())
    }
}

/// Where a round's core regions come from.
#[derive(Debug, Clone)]
pub enum RegionSource {
    /// Importance scoring on the current frozen weights (the default).
    Importance,
    /// Uniformly random regions of the same cardinality (ablation arm).
    Random,
    /// Caller-supplied regions, e.g. planted ground truth.
    Fixed(BTreeMap<TargetId, CoreRegion>),
}

/// Metric on a held-out split. Accuracy is argmax agreement per column;
/// real-valued targets are compared by their own argmax.
pub fn evaluate(model: &TinyModel, eval: &EvalData) -> Result<f64> {
    let outputs = model.forward(&eval.inputs)?;
    match (eval.metric, &eval.targets) {
        (MetricKind::Accuracy, BatchTargets::Class(labels)) => {
            let mut hits = 0usize;
            for (j, &y) in labels.iter().enumerate() {
                if argmax_col(&outputs, j) == y {
                    hits += 1;
                }
            }
            Ok(hits as f64 / labels.len() as f64)
        }
        (MetricKind::Accuracy, BatchTargets::Real(t)) => {
            if t.shape() != outputs.shape() {
                return Err(Error::Shape {
                    op: "evaluate",
                    lhs: outputs.shape(),
                    rhs: t.shape(),
                });
            }
            let n = t.cols();
            let mut hits = 0usize;
            for j in 0..n {
                if argmax_col(&outputs, j) == argmax_col(t, j) {
                    hits += 1;
                }
            }
            Ok(hits as f64 / n as f64)
        }
        (MetricKind::Mse, BatchTargets::Real(t)) => {
            if t.shape() != outputs.shape() {
                return Err(Error::Shape {
                    op: "evaluate",
                    lhs: outputs.shape(),
                    rhs: t.shape(),
                });
            }
            let n = t.cols() as f64;
            let sse: f64 = outputs
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            Ok(sse / n)
        }
        (MetricKind::Mse, BatchTargets::Class(_)) => {
            Err(Error::contract("mse metric needs real-valued targets"))
        }
    }
}

fn argmax_col(m: &Matrix, j: usize) -> usize {
    let mut best = 0usize;
    let mut best_v = m.get(0, j);
    for i in 1..m.rows() {
        let v = m.get(i, j);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Mean training loss of the model over the given batches.
pub fn mean_loss(model: &TinyModel, batches: &Batches) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in batches {
        let mut tape = Tape::new();
        let x_ref = tape.constant(x.clone());
        let refs = model.forward_taped(&mut tape, x_ref, TapeMode::Eval)?;
        let loss = model.loss_on_tape(&mut tape, refs.output, t)?;
        total += tape.value(loss).get(0, 0);
    }
    Ok(total / batches.len() as f64)
}

/// Optimizes the attached adapters of `targets` for `config.epochs`
/// passes over `train`. Frozen weights and masked factor entries are
/// untouched. Returns the per-epoch mean loss curve and per-target
/// learning rates actually used.
pub fn train_stage(
    model: &mut TinyModel,
    targets: &[TargetId],
    train: &Batches,
    config: &TrainConfig,
) -> Result<(Vec<f64>, BTreeMap<TargetId, f64>)> {
    if train.is_empty() {
        return Err(Error::contract("train_stage: empty training set"));
    }
    let mut optimizers: BTreeMap<TargetId, (ParamOptimizer, ParamOptimizer)> = BTreeMap::new();
    let mut lrs = BTreeMap::new();
    for &tid in targets {
        let adapter = model
            .linear(tid)?
            .adapter()
            .ok_or_else(|| Error::contract(format!("target {tid} has no adapter attached")))?;
        let lr = if config.lr_scaling_enabled {
            scaled_lr(config.base_lr, adapter.rho())?
        } else {
            config.base_lr
        };
        lrs.insert(tid, lr);
        optimizers.insert(
            tid,
            (
                ParamOptimizer::new(config.optimizer, lr, adapter.left().shape()),
                ParamOptimizer::new(config.optimizer, lr, adapter.right().shape()),
            ),
        );
    }

    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for (batch_idx, (x, t)) in train.iter().enumerate() {
            let mut tape = Tape::new();
            let x_ref = tape.constant(x.clone());
            let refs = model.forward_taped(&mut tape, x_ref, TapeMode::TrainAdapters)?;
            let loss = model.loss_on_tape(&mut tape, refs.output, t)?;
            let loss_value = tape.value(loss).get(0, 0);
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            epoch_loss += loss_value;
            let mut grads = tape.backward(loss)?;
            for (tid, left_ref, right_ref) in &refs.adapters {
                let Some((opt_l, opt_r)) = optimizers.get_mut(tid) else {
                    continue;
                };
                let gl = grads
                    .take(*left_ref)
                    .ok_or_else(|| Error::contract("missing left-factor gradient"))?;
                let gr = grads
                    .take(*right_ref)
                    .ok_or_else(|| Error::contract("missing right-factor gradient"))?;
                let adapter = model.linear_mut(*tid)?.adapter_mut().expect("checked above");
                let (left, right) = adapter.factors_mut();
                opt_l.step(left, &gl);
                opt_r.step(right, &gr);
            }
        }
        loss_curve.push(epoch_loss / train.len() as f64);
    }
    Ok((loss_curve, lrs))
}

/// Scores one target with the configured importance variant.
pub fn importance_for_target(
    model: &TinyModel,
    train: &Batches,
    target: TargetId,
    config: &TrainConfig,
) -> Result<ImportanceMap> {
    match config.importance_kind {
        ImportanceKind::Sensitivity => {
            sensitivity_scores(model, train, target, config.grad_aggregation)
        }
        ImportanceKind::Gradient => gradient_scores(model, train, target, config.grad_aggregation),
    }
}

fn regions_for_round(
    model: &TinyModel,
    train: &Batches,
    targets: &[TargetId],
    source: &RegionSource,
    config: &TrainConfig,
    round: usize,
) -> Result<BTreeMap<TargetId, CoreRegion>> {
    let mut regions = BTreeMap::new();
    for (t_idx, &tid) in targets.iter().enumerate() {
        let region = match source {
            RegionSource::Importance => {
                let imp = importance_for_target(model, train, tid, config)?;
                let mask = crate::importance::topk_mask(&imp, config.k)?;
                let (u_row, u_col) = density(&mask);
                select_core_region(&u_row, &u_col, config.p_fraction)?
            }
            RegionSource::Random => {
                let (p, q) = model.weight(tid)?.shape();
                let seed = derive_seed(config.seed, 0x7a0d + (round * 257 + t_idx) as u64);
                crate::baselines::random_core_region(p, q, config.p_fraction, seed)?
            }
            RegionSource::Fixed(map) => map
                .get(&tid)
                .ok_or_else(|| Error::contract(format!("no fixed region for target {tid}")))?
                .clone(),
        };
        regions.insert(tid, region);
    }
    Ok(regions)
}

/// Runs one masked stage across all targets: init adapters, train, merge.
/// A target whose constrained index set is empty contributes nothing to
/// the stage (its delta would be identically zero), so it is skipped and
/// reported with zero trainable parameters.
fn run_structured_stage(
    model: &mut TinyModel,
    targets: &[TargetId],
    regions: &BTreeMap<TargetId, CoreRegion>,
    stage: Stage,
    train: &Batches,
    eval: &EvalData,
    config: &TrainConfig,
    round: usize,
) -> Result<StageReport> {
    let mut active = Vec::new();
    for (t_idx, &tid) in targets.iter().enumerate() {
        let region = &regions[&tid];
        let empty = match stage {
            Stage::Row => region.rows().is_empty(),
            Stage::Column => region.cols().is_empty(),
            Stage::Dense => false,
        };
        if empty {
            continue;
        }
        let (p, q) = model.weight(tid)?.shape();
        let seed = derive_seed(
            config.seed,
            0x5eed + (round * 1031 + t_idx * 7 + stage as usize) as u64,
        );
        let adapter = init_adapter(p, q, config.rank, stage, region, seed)?;
        model.attach_adapter(tid, adapter)?;
        active.push(tid);
    }

    let (loss_curve, lrs) = if active.is_empty() {
        (Vec::new(), BTreeMap::new())
    } else {
        train_stage(model, &active, train, config)?
    };

    let mut target_stages = Vec::new();
    let mut trainable = 0usize;
    let mut rho_sum = 0.0;
    for &tid in targets {
        let region = &regions[&tid];
        if active.contains(&tid) {
            let adapter = model.linear(tid)?.adapter().expect("attached above");
            let count = adapter.count_trainable();
            trainable += count;
            rho_sum += adapter.rho();
            target_stages.push(TargetStage {
                target: tid.to_string(),
                rho: adapter.rho(),
                trainable: count,
                region_rows: region.rows().len(),
                region_cols: region.cols().len(),
                lr: lrs[&tid],
            });
            model.merge_adapter(tid)?;
        } else {
            rho_sum += 1.0;
            target_stages.push(TargetStage {
                target: tid.to_string(),
                rho: 1.0,
                trainable: 0,
                region_rows: region.rows().len(),
                region_cols: region.cols().len(),
                lr: 0.0,
            });
        }
    }

    Ok(StageReport {
        stage: stage.as_str().to_string(),
        epochs: config.epochs,
        trainable,
        rho: rho_sum / targets.len() as f64,
        targets: target_stages,
        loss_curve,
        eval_metric: evaluate(model, eval)?,
        sparsity: None,
    })
}

/// Full pipeline: per round, compute regions, then row stage and column
/// stage with merges. `arm` names the run in the report.
pub fn taso_finetune_with(
    model: &mut TinyModel,
    train: &Batches,
    eval: &EvalData,
    config: &TrainConfig,
    source: &RegionSource,
    arm: &str,
) -> Result<RunReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("taso_finetune: empty training set"));
    }
    let start = Instant::now();
    let targets = model.adapter_targets().to_vec();
    for &tid in &targets {
        if model.has_adapter(tid) {
            return Err(Error::contract(format!(
                "target {tid} already has an adapter attached"
            )));
        }
    }

    let mut rounds = Vec::with_capacity(config.rounds);
    let mut frozen_regions: Option<BTreeMap<TargetId, CoreRegion>> = None;
    let mut trainable_total = 0usize;

    for round in 1..=config.rounds {
        let regions = if config.recompute_regions || frozen_regions.is_none() {
            let r = regions_for_round(model, train, &targets, source, config, round)?;
            if !config.recompute_regions {
                frozen_regions = Some(r.clone());
            }
            r
        } else {
            frozen_regions.clone().unwrap()
        };

        let row = run_structured_stage(
            model, &targets, &regions, Stage::Row, train, eval, config, round,
        )?;
        let col = run_structured_stage(
            model, &targets, &regions, Stage::Column, train, eval, config, round,
        )?;
        trainable_total += row.trainable + col.trainable;
        rounds.push(RoundReport {
            round,
            stages: vec![row, col],
        });
    }

    let final_eval = rounds
        .last()
        .and_then(|r| r.stages.last())
        .map(|s| s.eval_metric)
        .unwrap_or(f64::NAN);

    let report = RunReport {
        arm: arm.to_string(),
        seed: config.seed,
        metric_kind: eval.metric.as_str().to_string(),
        final_eval,
        trainable_total,
        total_epochs: config.rounds * 2 * config.epochs,
        rounds,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: serde_json::to_value(config).map_err(|e| Error::Io(e.to_string()))?,
    };
    report.validate_finite()?;
    Ok(report)
}

/// The default arm: importance-selected regions.
pub fn taso_finetune(
    model: &mut TinyModel,
    train: &Batches,
    eval: &EvalData,
    config: &TrainConfig,
) -> Result<RunReport> {
    taso_finetune_with(model, train, eval, config, &RegionSource::Importance, "taso")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mlp, gaussian_matrix, Activation, LossKind};

    fn toy_batches(model: &TinyModel, n_batches: usize, batch: usize, seed: u64) -> Batches {
        let q = model.input_width();
        let p = model.output_width();
        (0..n_batches)
            .map(|b| {
                let x = gaussian_matrix(q, batch, derive_seed(seed, b as u64));
                let t = gaussian_matrix(p, batch, derive_seed(seed, 1000 + b as u64));
                (x, BatchTargets::Real(t))
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leaves_adapters_at_init() {
        let mut model = build_mlp(&[4, 4], Activation::None, LossKind::SquaredError, 3).unwrap();
        let train = toy_batches(&model, 2, 4, 9);
        let region = CoreRegion::new(vec![0, 1], vec![0], 0.3).unwrap();
        let adapter = init_adapter(4, 4, 1, Stage::Row, &region, 5).unwrap();
        model.attach_adapter(TargetId::main(0), adapter).unwrap();
        let config = TrainConfig {
            epochs: 0,
            base_lr: 0.1,
            ..TrainConfig::default()
        };
        let (curve, _) = train_stage(&mut model, &[TargetId::main(0)], &train, &config).unwrap();
        assert!(curve.is_empty());
        let delta = model.linear(TargetId::main(0)).unwrap().adapter().unwrap().effective_delta();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_without_adapter_is_contract_error() {
        let mut model = build_mlp(&[3, 3], Activation::None, LossKind::SquaredError, 4).unwrap();
        let train = toy_batches(&model, 1, 4, 2);
        let config = TrainConfig::default();
        let err = train_stage(&mut model, &[TargetId::main(0)], &train, &config).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_weights_do_not_move_during_training() {
        let mut model = build_mlp(&[4, 4], Activation::None, LossKind::SquaredError, 7).unwrap();
        let w_before = model.weight(TargetId::main(0)).unwrap().clone();
        let train = toy_batches(&model, 3, 4, 8);
        let region = CoreRegion::new(vec![0, 2], vec![1], 0.3).unwrap();
        let adapter = init_adapter(4, 4, 1, Stage::Row, &region, 6).unwrap();
        model.attach_adapter(TargetId::main(0), adapter).unwrap();
        let config = TrainConfig {
            epochs: 3,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        train_stage(&mut model, &[TargetId::main(0)], &train, &config).unwrap();
        assert_eq!(model.weight(TargetId::main(0)).unwrap().data(), w_before.data());
        // Support invariant holds bitwise after training.
        let delta = model.linear(TargetId::main(0)).unwrap().adapter().unwrap().effective_delta();
        for i in [1usize, 3] {
            for j in 0..4 {
                assert_eq!(delta.get(i, j).to_bits(), 0);
            }
        }
    }

    #[test]
    fn accuracy_metric_counts_argmax_agreement() {
        let model = build_mlp(&[2, 3], Activation::None, LossKind::SquaredError, 11).unwrap();
        let inputs = gaussian_matrix(2, 5, 12);
        let outputs = model.forward(&inputs).unwrap();
        let eval = EvalData {
            inputs: inputs.clone(),
            targets: BatchTargets::Real(outputs),
            metric: MetricKind::Accuracy,
        };
        assert_eq!(evaluate(&model, &eval).unwrap(), 1.0);
    }
}
