//! End-to-end commands: dataset generation, supervision export, training,
//! inference, evaluation, cost benchmarking and ablation grids.

mod commands;
mod config;
mod train;

pub use commands::{
    ablation_cell, cmd_ablate, cmd_bench, cmd_eval, cmd_gen, cmd_infer, cmd_targets, cmd_train, config_sidecar,
    evaluate_samples, infer_samples, run_experiment, sample_id, train_on, write_summary, AblationRow, BenchReport,
    Experiment, CONFIG_FILE, SUMMARY_COLUMNS, TRAIN_LOG_FILE, WEIGHTS_FILE,
};
pub use config::{AblateConfig, BenchConfig, GenConfig, RunConfig, TrainConfig, ABLATE_VARIANTS};
pub use train::{train_model, validation_count, write_train_log, EpochLog, TrainOutcome};
