//! Task generation, dataset ingestion, and experiment orchestration.

pub mod dataset;
pub mod experiments;
pub mod planted;

pub use dataset::{load_csv_dataset, write_csv_dataset, CsvData, CsvLabel, CsvSchema};
pub use experiments::{
    ablation_table, compose_tasks, export_heatmap, read_csv_matrix, run_ablation, run_taso_arm,
    sweep_curve_csv, sweep_p, CompositionCell, CompositionReport, SweepPoint, ABLATION_ARMS,
};
pub use planted::{
    generate_planted_task, slice_batches, LabelKind, PlantedSpec, PlantedTask, SupportSpec,
};
