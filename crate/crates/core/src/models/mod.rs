//! Trainable reference classifiers, the frozen local encoder, and the
//! metered closed-box service facade with output truncation and input
//! robustness modes.

mod checkpoint;
mod classifier;
mod local;
mod service;

pub use checkpoint::{read_container, write_container, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use classifier::{train_classifier, Arch, Classifier, TrainConfig, TrainSummary};
pub(crate) use classifier::{shuffle, stack_images};
pub use local::LocalModel;
pub use service::{ApiResponse, ApiSettings, OutputMode, Phase, Robustness, ServiceApi};
