//! Pre-training loop, run configuration, loss logging, stage analysis, and
//! the experiment matrix.

pub mod config;
pub mod logs;
pub mod matrix;
pub mod stages;
pub mod train;

pub use config::TrainConfig;
pub use logs::{EvalEntry, LossLog, TrainEntry, EVAL_CSV_HEADER, TRAIN_CSV_HEADER};
pub use matrix::{
    preset_pe_grid, run_experiment_matrix, run_experiment_matrix_on_shards, CellStatus,
    MatrixCell, MatrixRow, MatrixTable, MATRIX_CSV_HEADER,
};
pub use stages::{
    detect_stages, entries_from_losses, piecewise_linear_curve, StageParams, StageReport,
    DEFAULT_SMOOTH_WINDOW, STAGE_CSV_HEADER,
};
pub use train::{
    eval_objective_batch, evaluate_ppl, for_each_eval_batch, resume, run_steps, train,
    train_on_shards, RunOutput, TrainState,
};
