//! Loss routing for every training regime, SGD with warm-up schedules,
//! evaluation protocols and the deterministic run loop.

mod eval;
mod run;
mod schedule;
mod sgd;
mod step;

pub use eval::{
    argmax, clip_offsets, evaluate_image, evaluate_video, in_top_k, score_images, score_videos, softmax, EvalConfig,
    ImageScores, ScoreAveraging, VideoScores,
};
pub use run::{
    eval_sources, evaluate_all, finetune_network, run_training, EpochRecord, RunMetrics, TrainConfig, CSV_HEADER,
};
pub use schedule::{Schedule, ScheduleKind};
pub use sgd::Sgd;
pub use step::{compute_gradients, train_step, LossWeights, StepLosses, StepOptions, TrainMode, Variant};
