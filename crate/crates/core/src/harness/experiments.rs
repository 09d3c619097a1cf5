//! Experiment orchestration: ablation arms, retention sweeps, cross-task
//! composition, and CSV exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::dense_lora_finetune;
use crate::error::{Error, Result};
use crate::harness::planted::{generate_planted_task, PlantedSpec, PlantedTask};
use crate::models::{TargetId, TinyModel};
use crate::report::RunReport;
use crate::tensor::Matrix;
use crate::train::{evaluate, taso_finetune_with, RegionSource, TrainConfig};

pub const ABLATION_ARMS: [&str; 3] = ["taso", "taso_no_lr", "taso_random_region"];

/// Runs one named arm of the structured pipeline on a task.
pub fn run_taso_arm(
    task: &PlantedTask,
    config: &TrainConfig,
    arm: &str,
) -> Result<(TinyModel, RunReport)> {
    let mut model = task.model();
    let train = task.train_batches(config.batch_size);
    let (source, cfg);
    match arm {
        "taso" => {
            source = RegionSource::Importance;
            cfg = config.clone();
        }
        "taso_no_lr" => {
            source = RegionSource::Importance;
            cfg = TrainConfig {
                lr_scaling_enabled: false,
                ..config.clone()
            };
        }
        "taso_random_region" => {
            source = RegionSource::Random;
            cfg = config.clone();
        }
        other => return Err(Error::contract(format!("unknown ablation arm `{other}`"))),
    }
    let report = taso_finetune_with(&mut model, &train, task.eval_data(), &cfg, &source, arm)?;
    Ok((model, report))
}

/// Ablation: the three structured arms on identical seeds. One task and
/// one model initialization per seed, shared by every arm.
pub fn run_ablation(
    spec: &PlantedSpec,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<RunReport>> {
    if seeds.is_empty() {
        return Err(Error::contract("ablation needs at least one seed"));
    }
    let mut reports = Vec::with_capacity(seeds.len() * ABLATION_ARMS.len());
    for &seed in seeds {
        let task_spec = PlantedSpec {
            seed,
            ..spec.clone()
        };
        let task = generate_planted_task(&task_spec)?;
        let seeded = TrainConfig {
            seed,
            ..config.clone()
        };
        for arm in ABLATION_ARMS {
            let (_, report) = run_taso_arm(&task, &seeded, arm)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Per-arm mean metric table with deltas against the first arm, one CSV
/// line per arm: `arm,mean,delta`.
pub fn ablation_table(reports: &[RunReport]) -> String {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in reports {
        let entry = sums.entry(r.arm.as_str()).or_insert((0.0, 0));
        entry.0 += r.final_eval;
        entry.1 += 1;
    }
    let mean = |arm: &str| -> Option<f64> {
        sums.get(arm).map(|&(s, n)| s / n as f64)
    };
    let base = mean("taso").unwrap_or(f64::NAN);
    let mut out = String::new();
    for arm in ABLATION_ARMS {
        if let Some(m) = mean(arm) {
            if arm == "taso" {
                let _ = writeln!(out, "{arm},{m}");
            } else {
                let _ = writeln!(out, "{arm},{m},{}", m - base);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p: f64,
    pub metric: f64,
    pub trainable: usize,
    pub rho_row: f64,
    pub rho_col: f64,
}

/// One structured run per retention fraction, shared seed.
pub fn sweep_p(spec: &PlantedSpec, config: &TrainConfig, p_list: &[f64]) -> Result<Vec<SweepPoint>> {
    if p_list.is_empty() {
        return Err(Error::contract("sweep needs a non-empty p list"));
    }
    for &p in p_list {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::contract(format!("sweep p {p} outside (0, 1]")));
        }
    }
    let task = generate_planted_task(spec)?;
    let mut points = Vec::with_capacity(p_list.len());
    for &p in p_list {
        let cfg = TrainConfig {
            p_fraction: p,
            ..config.clone()
        };
        let (_, report) = run_taso_arm(&task, &cfg, "taso")?;
        let first_round = &report.rounds[0];
        points.push(SweepPoint {
            p,
            metric: report.final_eval,
            trainable: report.trainable_total,
            rho_row: first_round.stages[0].rho,
            rho_col: first_round.stages[1].rho,
        });
    }
    Ok(points)
}

/// `p,metric,trainable,rho_row,rho_col` per line.
pub fn sweep_curve_csv(points: &[SweepPoint]) -> String {
    let mut out = String::new();
    for pt in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            pt.p, pt.metric, pt.trainable, pt.rho_row, pt.rho_col
        );
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionCell {
    /// Which task's module comes first (always the dense one).
    pub base_task: String,
    pub second_task: String,
    /// "dense" or "pruned".
    pub second_kind: String,
    pub base_task_metric: f64,
    pub second_task_metric: f64,
    pub mean_metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionReport {
    pub cells: Vec<CompositionCell>,
}

/// Weight deltas a finished run produced, per adapted target.
fn extract_deltas(base: &TinyModel, tuned: &TinyModel) -> Result<Vec<(TargetId, Matrix)>> {
    let mut deltas = Vec::new();
    for id in base.all_matrix_ids() {
        let before = base.weight(id)?;
        let after = tuned.weight(id)?;
        deltas.push((id, after.sub(before)?));
    }
    Ok(deltas)
}

fn apply_deltas(base: &TinyModel, deltas: &[&[(TargetId, Matrix)]]) -> Result<TinyModel> {
    let mut composed = base.clone();
    for set in deltas {
        for (id, delta) in set.iter() {
            composed.linear_mut(*id)?.merge_matrix(delta)?;
        }
    }
    Ok(composed)
}

/// Trains dense and structured modules for two tasks sharing one frozen
/// base, then evaluates additive compositions `W0 + delta_base + delta_second`
/// for both orderings and both second-module kinds. Each module is trained
/// exactly once and reused across cells.
pub fn compose_tasks(
    spec_a: &PlantedSpec,
    spec_b: &PlantedSpec,
    config: &TrainConfig,
    dense_rank: usize,
) -> Result<CompositionReport> {
    if spec_a.widths != spec_b.widths || spec_a.activation != spec_b.activation {
        return Err(Error::contract("composition tasks must share the base architecture"));
    }
    let task_a = generate_planted_task(spec_a)?;
    let task_b = generate_planted_task(spec_b)?;
    let base_a = task_a.model();
    let base_b = task_b.model();
    // Same architecture does not imply the same frozen weights; require
    // identical base seeds so the deltas compose on one model.
    for id in base_a.all_matrix_ids() {
        if base_a.weight(id)?.data() != base_b.weight(id)?.data() {
            return Err(Error::contract(
                "composition tasks must share the frozen base (same base seed)",
            ));
        }
    }
    let base = base_a;

    let train_module = |task: &PlantedTask, pruned: bool| -> Result<Vec<(TargetId, Matrix)>> {
        let mut model = task.model();
        let train = task.train_batches(config.batch_size);
        if pruned {
            taso_finetune_with(
                &mut model,
                &train,
                task.eval_data(),
                config,
                &RegionSource::Importance,
                "taso",
            )?;
        } else {
            dense_lora_finetune(&mut model, &train, task.eval_data(), dense_rank, config)?;
        }
        extract_deltas(&base, &model)
    };

    let dense_a = train_module(&task_a, false)?;
    let dense_b = train_module(&task_b, false)?;
    let pruned_a = train_module(&task_a, true)?;
    let pruned_b = train_module(&task_b, true)?;

    let mut cells = Vec::new();
    let pairs: [(&str, &PlantedTask, &Vec<_>, &str, &PlantedTask, &Vec<_>, &str); 4] = [
        ("a", &task_a, &dense_a, "b", &task_b, &dense_b, "dense"),
        ("a", &task_a, &dense_a, "b", &task_b, &pruned_b, "pruned"),
        ("b", &task_b, &dense_b, "a", &task_a, &dense_a, "dense"),
        ("b", &task_b, &dense_b, "a", &task_a, &pruned_a, "pruned"),
    ];
    for (base_name, base_task, base_deltas, second_name, second_task, second_deltas, kind) in pairs {
        let composed = apply_deltas(&base, &[base_deltas, second_deltas])?;
        let m_base = evaluate(&composed, base_task.eval_data())?;
        let m_second = evaluate(&composed, second_task.eval_data())?;
        cells.push(CompositionCell {
            base_task: base_name.into(),
            second_task: second_name.into(),
            second_kind: kind.into(),
            base_task_metric: m_base,
            second_task_metric: m_second,
            mean_metric: 0.5 * (m_base + m_second),
        });
    }
    Ok(CompositionReport { cells })
}

/// Row-major CSV matrix, `\n` line endings, shortest round-trip floats.
pub fn export_heatmap(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m.get(i, j));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(&path.display().to_string(), e))
}

/// Inverse of `export_heatmap`.
pub fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("bad number `{tok}`"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "empty csv matrix".into(),
        });
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse {
            line: 0,
            msg: "ragged csv matrix".into(),
        });
    }
    let data: Vec<f64> = rows.concat();
    Matrix::from_vec(rows.len(), cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_bit_exact_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let m = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        export_heatmap(&m, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "1,0\n0,1\n");
        let back = read_csv_matrix(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn heatmap_round_trip_with_fractional_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h2.csv");
        let m = Matrix::from_rows(&[&[0.1, -2.5e-11], &[1.0 / 3.0, 7.0]]).unwrap();
        export_heatmap(&m, &path).unwrap();
        assert_eq!(read_csv_matrix(&path).unwrap().data(), m.data());
    }

    #[test]
    fn sweep_rejects_bad_fractions() {
        let spec = PlantedSpec::default();
        let config = TrainConfig::default();
        assert!(sweep_p(&spec, &config, &[]).is_err());
        assert!(sweep_p(&spec, &config, &[0.0]).is_err());
    }
}
