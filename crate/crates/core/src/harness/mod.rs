//! Training, inference and evaluation drivers built on the core modules.

pub mod config;
pub mod fuse;
pub mod plots;
pub mod sweep;
pub mod train;
pub mod trials;

pub use config::{lr_at, MaskConfig, MaskKind, TrainConfig, ENV_PREFIX};
pub use fuse::{evaluate_directory, fuse_directory, fuse_directory_with, FusedEntry, Manifest, SkippedEntry, MANIFEST_FILE};
pub use plots::{emit_plots, MethodReports, PlotOutputs};
pub use sweep::{cell_config, sweep, SweepCell, SweepResult, DEFAULT_ALPHAS, DEFAULT_GAMMAS, SWEEP_EPOCHS};
pub use train::{
    attach_training_masks, compute_gradients, make_batch, prepare_patches, train, train_from_config, Batch,
    EpochSummary, StepGradients, TrainSummary, Trainer, BEST_CHECKPOINT,
};
pub use trials::{run_trials, TrialResult, TrialSpec, TrialTable};
