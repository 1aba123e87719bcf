//! Supervised and teacher-student training loops.
//!
//! Both stages share one step implementation. Keypoint-stage samples are
//! crop scenes holding a single full-frame person, so augmentation and label
//! projection work unchanged for either stage.

mod benchmark;
mod crops;
mod ema;
mod optim;
mod ratio;
mod run;
mod step;

pub use benchmark::{run_benchmark_seed, ArmResult, BenchmarkConfig, BenchmarkData, SeedResult};
pub use crops::{gt_crop_scenes, pseudo_label_boxes_for_stage_two, FULL_FRAME};
pub use ema::{ema_update, TeacherStudent, DEFAULT_EMA_DECAY};
pub use optim::{Adam, OptimConfig};
pub use ratio::{interior_peak, RatioEntry, RatioLog};
pub use run::{
    read_telemetry, run_semisup, run_supervised, step_rng, RunPaths, StepRecord, TrainConfig,
    TrainOutcome,
};
pub use step::{scene_labels, train_step_semisup, train_step_supervised, BatchPlan, StepConfig};
