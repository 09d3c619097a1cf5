//! Run reports: the stable JSON schema every experiment arm emits.
//!
//! `wall_clock_secs` is the only field allowed to differ between two runs
//! of the same seeded config; everything else is deterministic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub arm: String,
    pub seed: u64,
    /// "accuracy" or "mse".
    pub metric_kind: String,
    pub final_eval: f64,
    /// Parameters optimized over the whole run, summed across stages.
    pub trainable_total: usize,
    pub total_epochs: usize,
    pub rounds: Vec<RoundReport>,
    pub wall_clock_secs: f64,
    /// Echo of the training configuration that produced this run.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub epochs: usize,
    /// Active parameters optimized in this stage, summed over targets.
    pub trainable: usize,
    /// Mean pruning ratio over targets.
    pub rho: f64,
    pub targets: Vec<TargetStage>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Metric on the eval split after this stage's merge.
    pub eval_metric: f64,
    /// Pruned fraction of adapter entries; magnitude-pruning arms only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TargetStage {
    pub target: String,
    pub rho: f64,
    pub trainable: usize,
    pub region_rows: usize,
    pub region_cols: usize,
    pub lr: f64,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Io(format!("serialize report: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(&path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("report: {e}"),
        })
    }

    /// All numeric payload must be finite for a report to be well-formed.
    pub fn validate_finite(&self) -> Result<()> {
        let mut values = vec![self.final_eval];
        for round in &self.rounds {
            for stage in &round.stages {
                values.push(stage.rho);
                values.push(stage.eval_metric);
                values.extend(stage.loss_curve.iter().copied());
                if let Some(s) = stage.sparsity {
                    values.push(s);
                }
                for t in &stage.targets {
                    values.push(t.rho);
                    values.push(t.lr);
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("report contains non-finite fields"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_json_round_trip() {
        let report = RunReport {
            arm: "taso".into(),
            seed: 7,
            metric_kind: "accuracy".into(),
            final_eval: 0.93,
            trainable_total: 72,
            total_epochs: 10,
            rounds: vec![RoundReport {
                round: 1,
                stages: vec![StageReport {
                    stage: "row".into(),
                    epochs: 5,
                    trainable: 36,
                    rho: 0.875,
                    targets: vec![TargetStage {
                        target: "0:main".into(),
                        rho: 0.875,
                        trainable: 36,
                        region_rows: 4,
                        region_cols: 3,
                        lr: 0.01,
                    }],
                    loss_curve: vec![1.0, 0.5],
                    eval_metric: 0.9,
                    sparsity: None,
                }],
            }],
            wall_clock_secs: 0.25,
            config: serde_json::json!({"epochs": 5}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let back = RunReport::load(&path).unwrap();
        assert_eq!(back, report);
        back.validate_finite().unwrap();
    }
}
