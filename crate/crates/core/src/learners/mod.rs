//! Meta-learners for segmentation from sparse labels: losses, prototype
//! machinery, per-episode steps, optimisers, training and inference.

pub mod evaluate;
pub mod infer;
pub mod loss;
pub mod optim;
pub mod proto;
pub mod steps;
pub mod train;

pub use evaluate::{evaluate_cells, predict_episode, EvalSettings, Prediction};
pub use infer::{argmax_labels, predict_seg, protoseg_infer, weasel_infer};
pub use loss::{ce_loss, sce_loss, SceNorm};
pub use optim::{Adam, AdamConfig};
pub use proto::{Averaging, PrototypeSet};
pub use steps::{meta_step, step_loss, Learner, StepConfig, StepOutput, Task};
pub use train::{meta_train, sl_train, EpochLog, TrainConfig, TrainOutcome, TrainSource, Validation};
