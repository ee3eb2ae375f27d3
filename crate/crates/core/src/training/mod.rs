mod ablation;
mod dataset;
mod models;
mod phase2;
mod synthetic;

pub use ablation::{ablate, measured_run, reconstruction_mse, AblationParam, AblationReport, RunMetrics, EXPLOSION_THRESHOLD};
pub use dataset::{Dataset, LabelRecord, Sample};
pub use models::{load_critic, save_critic, Generator};
pub use phase2::{
    initial_models, sample_batch, train_phase2, train_phase2_observed, BatchItem, BatchSampler, EpochRecord, History,
    Phase2Output, StepEvent, TrainConfig,
};
pub use synthetic::{compose_scene, generate_synthetic_dataset, SyntheticSpec};
