//! Scratch calibration harness for the desk-scale planted task.

use std::time::Instant;

use taso_core::baselines::dense_lora_finetune;
use taso_core::harness::{generate_planted_task, run_taso_arm, sweep_p, PlantedSpec, SupportSpec};
use taso_core::optim::OptimizerKind;
use taso_core::train::{evaluate, importance_for_target, ImportanceKind, TrainConfig};

fn main() {
    let grid = [
        // (optimizer, lr, epochs, amplitude, decay, n_train)
        (OptimizerKind::Sgd, 0.0015, 40, 3.0, 0.25, 512),
        (OptimizerKind::Sgd, 0.0015, 60, 3.0, 0.25, 512),
        (OptimizerKind::Sgd, 0.001, 60, 3.0, 0.25, 512),
        (OptimizerKind::Sgd, 0.0015, 60, 3.5, 0.25, 512),
    ];
    for (opt, lr, epochs, amplitude, decay, n_train) in grid {
        let start = Instant::now();
        run_combo(opt, lr, epochs, amplitude, decay, n_train);
        println!("combo took {:.1}s\n", start.elapsed().as_secs_f64());
    }
}

fn run_combo(opt: OptimizerKind, lr: f64, epochs: usize, amplitude: f64, decay: f64, n_train: usize) {
    println!("=== {opt:?} lr {lr} epochs {epochs} amplitude {amplitude} decay {decay} n_train {n_train} ===");
    let base_spec = PlantedSpec {
        widths: vec![32, 32],
        support: SupportSpec::Cross {
            rows: vec![3, 11, 27],
            cols: vec![5, 14, 30],
        },
        amplitude,
        decay,
        train_examples: n_train,
        eval_examples: 512,
        ..PlantedSpec::default()
    };
    let base_config = TrainConfig {
        base_lr: lr,
        epochs,
        batch_size: 32,
        optimizer: opt,
        ..TrainConfig::default()
    };

    let seeds: Vec<u64> = (100..110).collect();
    let mut ratio_ok = 0;
    let mut nolr_w = 0;
    let mut rand_w = 0;
    let mut sens_sum = 0.0;
    let mut grad_sum = 0.0;
    let mut min_ratio: f64 = 2.0;

    for &seed in &seeds {
        let spec = PlantedSpec { seed, ..base_spec.clone() };
        let task = generate_planted_task(&spec).unwrap();
        let config = TrainConfig { seed, ..base_config.clone() };

        let init_acc = evaluate(&task.model(), task.eval_data()).unwrap();
        let (_, taso) = run_taso_arm(&task, &config, "taso").unwrap();
        let (_, nolr) = run_taso_arm(&task, &config, "taso_no_lr").unwrap();
        let (_, rnd) = run_taso_arm(&task, &config, "taso_random_region").unwrap();
        let grad_cfg = TrainConfig { importance_kind: ImportanceKind::Gradient, ..config.clone() };
        let (_, grad) = run_taso_arm(&task, &grad_cfg, "taso").unwrap();

        let mut dense_model = task.model();
        let dense = dense_lora_finetune(
            &mut dense_model,
            &task.train_batches(config.batch_size),
            task.eval_data(),
            8,
            &config,
        )
        .unwrap();

        let ratio = taso.final_eval / dense.final_eval;
        min_ratio = min_ratio.min(ratio);
        // Region recall: how many of the 6 true indices were selected.
        let row_stage = &taso.rounds[0].stages[0].targets[0];
        let recall = {
            let true_rows = [3usize, 11, 27];
            let true_cols = [5usize, 14, 30];
            let cfg = config.clone();
            let imp = importance_for_target(&task.model(), &task.train_batches(cfg.batch_size), task.target(), &cfg).unwrap();
            let mask = taso_core::importance::topk_mask(&imp, cfg.k).unwrap();
            let (ur, uc) = taso_core::importance::density(&mask);
            let region = taso_core::importance::select_core_region(&ur, &uc, cfg.p_fraction).unwrap();
            true_rows.iter().filter(|r| region.rows().contains(r)).count()
                + true_cols.iter().filter(|c| region.cols().contains(c)).count()
        };
        println!(
            "seed {seed}: init {init_acc:.3} taso {:.3} nolr {:.3} rand {:.3} dense {:.3} grad-imp {:.3} ratio {ratio:.3} params {}/{} recall {recall}/6 rows {} cols {} last_loss {:.2e}",
            taso.final_eval, nolr.final_eval, rnd.final_eval, dense.final_eval, grad.final_eval,
            taso.trainable_total, dense.trainable_total,
            row_stage.region_rows, row_stage.region_cols,
            taso.rounds[0].stages[1].loss_curve.last().unwrap(),
        );
        if ratio >= 0.95 {
            ratio_ok += 1;
        }
        if nolr.final_eval < taso.final_eval {
            nolr_w += 1;
        }
        if rnd.final_eval < taso.final_eval {
            rand_w += 1;
        }
        sens_sum += taso.final_eval;
        grad_sum += grad.final_eval;
    }
    println!(
        "ratio>=0.95: {ratio_ok}/10  nolr<taso: {nolr_w}/10  rand<taso: {rand_w}/10  min_ratio {min_ratio:.3}  sens_mean {:.4} grad_mean {:.4} sens>=grad {}",
        sens_sum / 10.0,
        grad_sum / 10.0,
        sens_sum >= grad_sum,
    );

    // p-sweep at 3 seeds.
    for seed in [100u64, 101, 102] {
        let spec = PlantedSpec { seed, ..base_spec.clone() };
        let config = TrainConfig { seed, ..base_config.clone() };
        let points = sweep_p(&spec, &config, &[0.02, 0.05, 0.10, 0.20, 0.40]).unwrap();
        let max = points.iter().map(|p| p.metric).fold(0.0, f64::max);
        let at_010 = points.iter().find(|p| p.p == 0.10).unwrap().metric;
        let min_low = points
            .iter()
            .filter(|p| p.p < 0.40)
            .map(|p| p.metric)
            .fold(2.0, f64::min);
        print!("sweep seed {seed}: ");
        for pt in &points {
            print!("p{:.2}={:.3} ", pt.p, pt.metric);
        }
        println!(
            "| p10 within 2pts: {} | no collapse: {}",
            at_010 >= max - 0.02,
            min_low >= max - 0.10
        );
    }
}
