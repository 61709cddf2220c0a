//! Desk-scale laboratory for adapting a closed-box, probability-only
//! classification API to a downstream task.
//!
//! The crate implements the prime-then-reprogram pipeline (query once for
//! soft labels, fit a local head, then learn a visual prompt with exact
//! gradients), zeroth-order baselines (RGF and SPSA-GC) that optimize the
//! prompt through the metered API, label-mapping schemes bridging source
//! and target label spaces, a model-selection rule, and an empirical
//! verifier for the performance sandwich bound. Every API interaction is
//! metered so experiments report exact call counts and simulated cost.

pub mod error;
pub mod harness;
pub mod models;
pub mod numeric;
pub mod priming;
pub mod reprogram;
pub mod theory;
pub mod zoo;

pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport, LabConfig, Method, SyntheticTask};
pub use models::{ApiResponse, Classifier, LocalModel, OutputMode, Phase, Robustness, ServiceApi};
pub use numeric::{Graph, ParamSet, PrimingLossKind, Tensor};
pub use priming::{FaithfulnessReport, PrimingConfig, SoftLabelSet};
pub use reprogram::{LabelMap, PaddingPrompt, Prompt, VrConfig, WatermarkPrompt};
pub use theory::BoundReport;
pub use zoo::{ZooConfig, ZooEstimator, ZooTrace};
