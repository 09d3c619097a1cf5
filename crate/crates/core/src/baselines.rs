//! Comparison arms: dense LoRA, DARE-style rescaling, random core
//! regions, and lottery-ticket iterative magnitude pruning over adapter
//! factors.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::importance::CoreRegion;
use crate::lora::{init_adapter, Stage};
use crate::models::TinyModel;
use crate::report::{RoundReport, RunReport, StageReport, TargetStage};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Matrix;
use crate::train::{evaluate, train_stage, Batches, EvalData, TrainConfig};

/// Standard unmasked LoRA: dense rank-`r` adapters on every target,
/// trained once and merged.
pub fn dense_lora_finetune(
    model: &mut TinyModel,
    train: &Batches,
    eval: &EvalData,
    r: usize,
    config: &TrainConfig,
) -> Result<RunReport> {
    let config = TrainConfig {
        rank: r,
        ..config.clone()
    };
    config.validate()?;
    let start = Instant::now();
    let targets = model.adapter_targets().to_vec();
    let empty = CoreRegion::new(vec![], vec![], 1.0)?;
    for (t_idx, &tid) in targets.iter().enumerate() {
        let (p, q) = model.weight(tid)?.shape();
        let adapter = init_adapter(
            p,
            q,
            r,
            Stage::Dense,
            &empty,
            derive_seed(config.seed, 0xde55e + t_idx as u64),
        )?;
        model.attach_adapter(tid, adapter)?;
    }
    let (loss_curve, lrs) = train_stage(model, &targets, train, &config)?;

    let mut target_stages = Vec::new();
    let mut trainable = 0usize;
    for &tid in &targets {
        let adapter = model.linear(tid)?.adapter().expect("attached above");
        let count = adapter.count_trainable();
        trainable += count;
        target_stages.push(TargetStage {
            target: tid.to_string(),
            rho: 0.0,
            trainable: count,
            region_rows: 0,
            region_cols: 0,
            lr: lrs[&tid],
        });
        model.merge_adapter(tid)?;
    }

    let eval_metric = evaluate(model, eval)?;
    let report = RunReport {
        arm: "dense_lora".into(),
        seed: config.seed,
        metric_kind: eval.metric.as_str().into(),
        final_eval: eval_metric,
        trainable_total: trainable,
        total_epochs: config.epochs,
        rounds: vec![RoundReport {
            round: 1,
            stages: vec![StageReport {
                stage: "dense".into(),
                epochs: config.epochs,
                trainable,
                rho: 0.0,
                targets: target_stages,
                loss_curve,
                eval_metric,
                sparsity: None,
            }],
        }],
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: serde_json::to_value(&config).map_err(|e| Error::Io(e.to_string()))?,
    };
    report.validate_finite()?;
    Ok(report)
}

/// Amplifies every entry by `1/(1-rho)`; zeros stay zero.
pub fn dare_rescale(delta: &Matrix, rho: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::contract(format!("pruning ratio {rho} outside [0, 1)")));
    }
    Ok(delta.scale(1.0 / (1.0 - rho)))
}

/// Uniformly random subset of the joint row+column list with the same
/// cardinality rule as importance-based selection.
pub fn random_core_region(p: usize, q: usize, p_fraction: f64, seed: u64) -> Result<CoreRegion> {
    if !(p_fraction > 0.0 && p_fraction <= 1.0) {
        return Err(Error::contract(format!(
            "core-region fraction {p_fraction} outside (0, 1]"
        )));
    }
    let total = p + q;
    let take = ((p_fraction * total as f64).ceil() as usize).clamp(1, total);
    let mut rng = rng_from(seed);
    let chosen = rand::seq::index::sample(&mut rng, total, take);
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for idx in chosen.iter() {
        if idx < p {
            rows.push(idx);
        } else {
            cols.push(idx - p);
        }
    }
    CoreRegion::new(rows, cols, p_fraction)
}

/// Lottery-ticket probe over adapter factors: train dense, then repeat
/// prune-smallest / rewind-survivors / retrain with a geometric sparsity
/// schedule `s_t = 1 - (1 - target)^(t/n)`. Pruning is local to each
/// target's adapter, pooling its two factors.
pub fn imp_lora(
    model: &mut TinyModel,
    train: &Batches,
    eval: &EvalData,
    r: usize,
    target_sparsity: f64,
    n_iterations: usize,
    config: &TrainConfig,
) -> Result<RunReport> {
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(Error::contract(format!(
            "target sparsity {target_sparsity} outside (0, 1)"
        )));
    }
    if n_iterations == 0 {
        return Err(Error::contract("imp needs at least one iteration"));
    }
    let config = TrainConfig {
        rank: r,
        ..config.clone()
    };
    config.validate()?;
    let start = Instant::now();
    let targets = model.adapter_targets().to_vec();
    let empty = CoreRegion::new(vec![], vec![], 1.0)?;

    // Dense training pass; initial factors are kept for rewinding.
    let mut init_factors = Vec::new();
    for (t_idx, &tid) in targets.iter().enumerate() {
        let (p, q) = model.weight(tid)?.shape();
        let adapter = init_adapter(
            p,
            q,
            r,
            Stage::Dense,
            &empty,
            derive_seed(config.seed, 0x1337 + t_idx as u64),
        )?;
        init_factors.push((adapter.left().clone(), adapter.right().clone()));
        model.attach_adapter(tid, adapter)?;
    }
    let (dense_curve, lrs) = train_stage(model, &targets, train, &config)?;

    let entry_counts: Vec<usize> = targets
        .iter()
        .map(|&tid| {
            let (p, q) = model.weight(tid).expect("target exists").shape();
            p * r + r * q
        })
        .collect();
    let total_entries: usize = entry_counts.iter().sum();

    let mut stages = Vec::with_capacity(n_iterations + 1);
    stages.push(StageReport {
        stage: "imp_dense".into(),
        epochs: config.epochs,
        trainable: total_entries,
        rho: 0.0,
        targets: targets
            .iter()
            .enumerate()
            .map(|(t_idx, &tid)| TargetStage {
                target: tid.to_string(),
                rho: 0.0,
                trainable: entry_counts[t_idx],
                region_rows: 0,
                region_cols: 0,
                lr: lrs[&tid],
            })
            .collect(),
        loss_curve: dense_curve,
        eval_metric: eval_with_adapters(model, eval)?,
        sparsity: Some(0.0),
    });

    // Survivor bitmaps per target, pooled over (left, right) flat entries.
    let mut survivors: Vec<Vec<bool>> = entry_counts.iter().map(|&n| vec![true; n]).collect();
    let mut trainable_total = total_entries;

    for t in 1..=n_iterations {
        let s_t = 1.0 - (1.0 - target_sparsity).powf(t as f64 / n_iterations as f64);
        let mut pruned_entries = 0usize;
        let mut survivor_entries = 0usize;

        for (t_idx, &tid) in targets.iter().enumerate() {
            let n = entry_counts[t_idx];
            let want_zeros = ((s_t * n as f64).ceil() as usize).min(n - 1);
            let adapter = model.linear(tid)?.adapter().expect("attached");
            let flat: Vec<f64> = adapter
                .left()
                .data()
                .iter()
                .chain(adapter.right().data())
                .copied()
                .collect();

            // Rank current survivors by trained magnitude, smallest first,
            // ties by flat index.
            let mut candidates: Vec<usize> = (0..n).filter(|&i| survivors[t_idx][i]).collect();
            candidates.sort_by(|&a, &b| {
                flat[a]
                    .abs()
                    .partial_cmp(&flat[b].abs())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let current_zeros = n - candidates.len();
            let newly = want_zeros.saturating_sub(current_zeros);
            for &i in candidates.iter().take(newly) {
                survivors[t_idx][i] = false;
            }

            // Rewind survivors to initialization, zero the pruned ones, and
            // install the accumulated masks.
            let (init_left, init_right) = &init_factors[t_idx];
            let left_len = init_left.len();
            let mut new_left = vec![0.0; left_len];
            let mut new_right = vec![0.0; init_right.len()];
            let mut mask_left = vec![0.0; left_len];
            let mut mask_right = vec![0.0; init_right.len()];
            for i in 0..n {
                if survivors[t_idx][i] {
                    if i < left_len {
                        new_left[i] = init_left.data()[i];
                        mask_left[i] = 1.0;
                    } else {
                        new_right[i - left_len] = init_right.data()[i - left_len];
                        mask_right[i - left_len] = 1.0;
                    }
                }
            }
            let survivor_count = survivors[t_idx].iter().filter(|&&s| s).count();
            pruned_entries += n - survivor_count;
            survivor_entries += survivor_count;

            let adapter = model.linear_mut(tid)?.adapter_mut().expect("attached");
            let (lshape, rshape) = (adapter.left().shape(), adapter.right().shape());
            adapter.set_factors(
                Matrix::from_vec(lshape.0, lshape.1, new_left)?,
                Matrix::from_vec(rshape.0, rshape.1, new_right)?,
            )?;
            let rho = (n - survivor_count) as f64 / n as f64;
            adapter.set_unstructured_masks(
                Some(Matrix::from_vec(lshape.0, lshape.1, mask_left)?),
                Some(Matrix::from_vec(rshape.0, rshape.1, mask_right)?),
                rho,
            )?;
        }

        let (curve, lrs) = train_stage(model, &targets, train, &config)?;
        trainable_total += survivor_entries;
        let sparsity = pruned_entries as f64 / total_entries as f64;
        stages.push(StageReport {
            stage: format!("imp_iter_{t}"),
            epochs: config.epochs,
            trainable: survivor_entries,
            rho: sparsity,
            targets: targets
                .iter()
                .enumerate()
                .map(|(t_idx, &tid)| TargetStage {
                    target: tid.to_string(),
                    rho: 1.0 - survivors[t_idx].iter().filter(|&&s| s).count() as f64
                        / entry_counts[t_idx] as f64,
                    trainable: survivors[t_idx].iter().filter(|&&s| s).count(),
                    region_rows: 0,
                    region_cols: 0,
                    lr: lrs[&tid],
                })
                .collect(),
            loss_curve: curve,
            eval_metric: eval_with_adapters(model, eval)?,
            sparsity: Some(sparsity),
        });
    }

    for &tid in &targets {
        model.merge_adapter(tid)?;
    }
    let final_eval = evaluate(model, eval)?;

    let report = RunReport {
        arm: "imp".into(),
        seed: config.seed,
        metric_kind: eval.metric.as_str().into(),
        final_eval,
        trainable_total,
        total_epochs: (n_iterations + 1) * config.epochs,
        rounds: vec![RoundReport { round: 1, stages }],
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: serde_json::to_value(&config).map_err(|e| Error::Io(e.to_string()))?,
    };
    report.validate_finite()?;
    Ok(report)
}

/// Evaluation with adapters still attached (forward includes their delta).
fn eval_with_adapters(model: &TinyModel, eval: &EvalData) -> Result<f64> {
    evaluate(model, eval)
}

/// DARE-style arm: train dense LoRA, zero the trained delta outside an
/// importance-selected cross region, amplify survivors by `1/(1-rho)`,
/// and merge the rescaled delta.
pub fn dare_finetune(
    model: &mut TinyModel,
    train: &Batches,
    eval: &EvalData,
    r: usize,
    config: &TrainConfig,
) -> Result<RunReport> {
    let config = TrainConfig {
        rank: r,
        ..config.clone()
    };
    config.validate()?;
    let start = Instant::now();
    let targets = model.adapter_targets().to_vec();

    // Importance regions from the pre-training weights.
    let mut regions = Vec::new();
    for &tid in &targets {
        let imp = crate::train::importance_for_target(model, train, tid, &config)?;
        let mask = crate::importance::topk_mask(&imp, config.k)?;
        let (u_row, u_col) = crate::importance::density(&mask);
        regions.push(crate::importance::select_core_region(&u_row, &u_col, config.p_fraction)?);
    }

    let empty = CoreRegion::new(vec![], vec![], 1.0)?;
    for (t_idx, &tid) in targets.iter().enumerate() {
        let (p, q) = model.weight(tid)?.shape();
        let adapter = init_adapter(
            p,
            q,
            r,
            Stage::Dense,
            &empty,
            derive_seed(config.seed, 0xda3e + t_idx as u64),
        )?;
        model.attach_adapter(tid, adapter)?;
    }
    let (loss_curve, lrs) = train_stage(model, &targets, train, &config)?;

    let mut target_stages = Vec::new();
    let mut trainable = 0usize;
    let mut rho_sum = 0.0;
    for (t_idx, &tid) in targets.iter().enumerate() {
        let adapter = model.detach_adapter(tid)?;
        trainable += adapter.count_trainable();
        let delta = adapter.effective_delta();
        let region = &regions[t_idx];
        let (p, q) = delta.shape();
        let in_rows: Vec<bool> = (0..p).map(|i| region.rows().contains(&i)).collect();
        let in_cols: Vec<bool> = (0..q).map(|j| region.cols().contains(&j)).collect();
        let mut pruned = Matrix::zeros(p, q);
        let mut zeroed = 0usize;
        for i in 0..p {
            for j in 0..q {
                if in_rows[i] || in_cols[j] {
                    pruned.set(i, j, delta.get(i, j));
                } else {
                    zeroed += 1;
                }
            }
        }
        let rho = zeroed as f64 / (p * q) as f64;
        rho_sum += rho;
        let rescaled = dare_rescale(&pruned, rho)?;
        model.linear_mut(tid)?.merge_matrix(&rescaled)?;
        target_stages.push(TargetStage {
            target: tid.to_string(),
            rho,
            trainable: adapter.count_trainable(),
            region_rows: region.rows().len(),
            region_cols: region.cols().len(),
            lr: lrs[&tid],
        });
    }

    let eval_metric = evaluate(model, eval)?;
    let report = RunReport {
        arm: "dare".into(),
        seed: config.seed,
        metric_kind: eval.metric.as_str().into(),
        final_eval: eval_metric,
        trainable_total: trainable,
        total_epochs: config.epochs,
        rounds: vec![RoundReport {
            round: 1,
            stages: vec![StageReport {
                stage: "dense_then_dare".into(),
                epochs: config.epochs,
                trainable,
                rho: rho_sum / targets.len() as f64,
                targets: target_stages,
                loss_curve,
                eval_metric,
                sparsity: None,
            }],
        }],
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: serde_json::to_value(&config).map_err(|e| Error::Io(e.to_string()))?,
    };
    report.validate_finite()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mlp, gaussian_matrix, Activation, BatchTargets, LossKind, TargetId};
    use crate::optim::OptimizerKind;
    use crate::train::MetricKind;

    #[test]
    fn dare_rescale_arithmetic() {
        let delta = Matrix::from_rows(&[&[1.0, 0.0], &[-2.0, 4.0]]).unwrap();
        let doubled = dare_rescale(&delta, 0.5).unwrap();
        assert_eq!(doubled.data(), &[2.0, 0.0, -4.0, 8.0]);
        let same = dare_rescale(&delta, 0.0).unwrap();
        assert_eq!(same.data(), delta.data());
        assert!(dare_rescale(&delta, 1.0).is_err());
    }

    #[test]
    fn dare_preserves_zero_set_and_scales_norm() {
        let delta = Matrix::from_rows(&[&[0.0, 3.0], &[0.0, -4.0]]).unwrap();
        let rho = 0.75;
        let rescaled = dare_rescale(&delta, rho).unwrap();
        assert_eq!(rescaled.get(0, 0), 0.0);
        assert_eq!(rescaled.get(1, 0), 0.0);
        let want = delta.frobenius_norm() / (1.0 - rho);
        assert!((rescaled.frobenius_norm() - want).abs() / want < 1e-12);
    }

    #[test]
    fn random_region_is_seeded_and_sized() {
        let a = random_core_region(10, 6, 0.25, 5).unwrap();
        let b = random_core_region(10, 6, 0.25, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows().len() + a.cols().len(), 4); // ceil(0.25 * 16)
        let c = random_core_region(10, 6, 0.25, 6).unwrap();
        assert!(a != c || a.rows() == c.rows()); // different seeds usually differ
    }

    #[test]
    fn random_region_frequencies_are_near_uniform() {
        // Each of the p + q = 16 joint slots should be picked with
        // probability 4/16 = 0.25; check rows within +-5 points.
        let trials = 1000;
        let mut counts = vec![0usize; 10];
        for seed in 0..trials {
            let region = random_core_region(10, 6, 0.25, seed).unwrap();
            for &i in region.rows() {
                counts[i] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.25).abs() <= 0.05, "row frequency {freq}");
        }
    }

    fn planted_linear_problem(seed: u64) -> (TinyModel, Batches, EvalData) {
        // Teacher = W0 + Delta on an 8x6 layer; targets are teacher outputs.
        let model = build_mlp(&[6, 8], Activation::None, LossKind::SquaredError, seed).unwrap();
        let delta = gaussian_matrix(8, 6, derive_seed(seed, 77)).scale(0.8);
        let w_star = model.weight(TargetId::main(0)).unwrap().add(&delta).unwrap();
        let make = |n: usize, salt: u64| {
            let x = gaussian_matrix(6, n, derive_seed(seed, salt));
            let y = w_star.matmul(&x).unwrap();
            (x, y)
        };
        let train: Batches = (0..4)
            .map(|b| {
                let (x, y) = make(16, 100 + b);
                (x, BatchTargets::Real(y))
            })
            .collect();
        let (ex, ey) = make(32, 999);
        let eval = EvalData {
            inputs: ex,
            targets: BatchTargets::Real(ey),
            metric: MetricKind::Mse,
        };
        (model, train, eval)
    }

    #[test]
    fn full_rank_dense_lora_reaches_least_squares_floor() {
        // With r = min(p, q) the adapter spans every delta, so training
        // loss can reach the least-squares optimum, which is ~0 for an
        // exactly realizable planted task.
        let (mut model, train, eval) = planted_linear_problem(31);
        let config = TrainConfig {
            base_lr: 0.08,
            epochs: 900,
            optimizer: OptimizerKind::Sgd,
            seed: 31,
            ..TrainConfig::default()
        };
        let report = dense_lora_finetune(&mut model, &train, &eval, 6, &config).unwrap();
        // Oracle: solve the normal equations for the best achievable loss.
        let floor = least_squares_floor(&train);
        assert!(floor < 1e-8, "planted task should be exactly realizable, floor {floor}");
        let final_loss = *report.rounds[0].stages[0].loss_curve.last().unwrap();
        assert!(
            final_loss <= 1e-4,
            "dense full-rank LoRA should fit the planted task, got {final_loss}"
        );
    }

    /// Independent least-squares oracle: best achievable mean loss over the
    /// training batches for an unconstrained weight, via normal equations.
    fn least_squares_floor(train: &Batches) -> f64 {
        let q = train[0].0.rows();
        let p = match &train[0].1 {
            BatchTargets::Real(t) => t.rows(),
            _ => unreachable!(),
        };
        // Accumulate X X^T and Y X^T over all examples.
        let mut xxt = vec![0.0; q * q];
        let mut yxt = vec![0.0; p * q];
        for (x, t) in train {
            let y = match t {
                BatchTargets::Real(m) => m,
                _ => unreachable!(),
            };
            for c in 0..x.cols() {
                for i in 0..q {
                    for j in 0..q {
                        xxt[i * q + j] += x.get(i, c) * x.get(j, c);
                    }
                }
                for i in 0..p {
                    for j in 0..q {
                        yxt[i * q + j] += y.get(i, c) * x.get(j, c);
                    }
                }
            }
        }
        // Solve W xxt = yxt row by row with Gaussian elimination.
        let solve = |rhs: &[f64]| -> Vec<f64> {
            let mut a = xxt.clone();
            let mut b = rhs.to_vec();
            for col in 0..q {
                let pivot = (col..q)
                    .max_by(|&r1, &r2| a[r1 * q + col].abs().partial_cmp(&a[r2 * q + col].abs()).unwrap())
                    .unwrap();
                for j in 0..q {
                    a.swap(col * q + j, pivot * q + j);
                }
                b.swap(col, pivot);
                let d = a[col * q + col];
                for r in 0..q {
                    if r != col && a[r * q + col] != 0.0 {
                        let f = a[r * q + col] / d;
                        for j in 0..q {
                            a[r * q + j] -= f * a[col * q + j];
                        }
                        b[r] -= f * b[col];
                    }
                }
            }
            (0..q).map(|i| b[i] / a[i * q + i]).collect()
        };
        let mut w = Matrix::zeros(p, q);
        for i in 0..p {
            let row: Vec<f64> = (0..q).map(|j| yxt[i * q + j]).collect();
            let sol = solve(&row);
            for j in 0..q {
                w.set(i, j, sol[j]);
            }
        }
        // Mean per-batch loss of the optimal weight.
        let mut total = 0.0;
        for (x, t) in train {
            let y = match t {
                BatchTargets::Real(m) => m,
                _ => unreachable!(),
            };
            let pred = w.matmul(x).unwrap();
            let n = x.cols() as f64;
            total += pred
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
        }
        total / train.len() as f64
    }

    #[test]
    fn dense_lora_zero_epochs_changes_nothing() {
        let (mut model, train, eval) = planted_linear_problem(32);
        let before = model.weight(TargetId::main(0)).unwrap().clone();
        let config = TrainConfig {
            epochs: 0,
            seed: 32,
            ..TrainConfig::default()
        };
        let report = dense_lora_finetune(&mut model, &train, &eval, 2, &config).unwrap();
        assert_eq!(model.weight(TargetId::main(0)).unwrap().data(), before.data());
        assert_eq!(report.trainable_total, 8 * 2 + 2 * 6);
    }

    #[test]
    fn imp_single_shot_prunes_exact_count() {
        let (mut model, train, eval) = planted_linear_problem(33);
        let config = TrainConfig {
            base_lr: 0.05,
            epochs: 5,
            seed: 33,
            ..TrainConfig::default()
        };
        let report = imp_lora(&mut model, &train, &eval, 2, 0.5, 1, &config).unwrap();
        // N = 8*2 + 2*6 = 28 entries; ceil(0.5 * 28) = 14 pruned.
        let last = report.rounds[0].stages.last().unwrap();
        assert_eq!(last.sparsity.unwrap(), 14.0 / 28.0);
        assert_eq!(report.total_epochs, 2 * config.epochs);
    }

    #[test]
    fn imp_sparsity_schedule_is_monotone_and_hits_target() {
        let (mut model, train, eval) = planted_linear_problem(34);
        let config = TrainConfig {
            base_lr: 0.05,
            epochs: 2,
            seed: 34,
            ..TrainConfig::default()
        };
        let n_iter = 5;
        let target = 0.9;
        let report = imp_lora(&mut model, &train, &eval, 2, target, n_iter, &config).unwrap();
        let sparsities: Vec<f64> = report.rounds[0]
            .stages
            .iter()
            .filter_map(|s| s.sparsity)
            .collect();
        assert_eq!(sparsities.len(), n_iter + 1);
        for w in sparsities.windows(2) {
            assert!(w[1] >= w[0], "sparsity must be nondecreasing: {sparsities:?}");
        }
        let n_total = 28.0;
        let final_s = *sparsities.last().unwrap();
        assert!((final_s - target).abs() <= 1.0 / n_total + 1e-12);
        assert_eq!(report.total_epochs, (n_iter + 1) * config.epochs);
    }

    #[test]
    fn imp_rejects_bad_target() {
        let (mut model, train, eval) = planted_linear_problem(35);
        let config = TrainConfig::default();
        assert!(imp_lora(&mut model, &train, &eval, 2, 0.0, 3, &config).is_err());
        assert!(imp_lora(&mut model, &train, &eval, 2, 1.0, 3, &config).is_err());
    }
}
