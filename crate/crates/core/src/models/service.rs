//! Metered closed-box facade over a frozen classifier. Callers see
//! prediction probabilities (possibly truncated) and a call meter; the
//! inner parameters are unreachable through the public surface.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numeric::{softmax, Tensor};

/// Meter tag for a prediction call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Infer,
}

/// How much of the probability vector the API reveals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum OutputMode {
    Full,
    TopkSoft(usize),
    TopkHard(usize),
}

/// Input-side robustness preprocessing applied before the inner forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "levels")]
pub enum Robustness {
    None,
    /// Round each pixel to the nearest of `levels` uniform values in [0,1].
    Quantize(u32),
}

/// Mode-dependent payload of one prediction call.
#[derive(Clone, Debug, PartialEq)]
pub enum ApiResponse {
    /// Probability vector over all classes.
    Full(Tensor),
    /// Top-k (class, probability) pairs, sorted by probability descending
    /// (ties broken toward the smaller class index).
    TopkSoft(Vec<(usize, f64)>),
    /// Ordered top-k class indices, no scores.
    TopkHard(Vec<usize>),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ApiSettings {
    pub output_mode: OutputMode,
    pub robustness: Robustness,
    pub price_per_call: f64,
    pub debug_logits_enabled: bool,
}

impl Default for ApiSettings {
    fn default() -> Self {
        ApiSettings {
            output_mode: OutputMode::Full,
            robustness: Robustness::None,
            price_per_call: 1e-3,
            debug_logits_enabled: false,
        }
    }
}

/// The closed-box service. Every `predict` increments the meter by
/// exactly one under the given phase; `debug_logits` bypasses the cost
/// meter and counts on its own debug counter.
pub struct ServiceApi {
    inner: Classifier,
    settings: ApiSettings,
    train_calls: AtomicU64,
    infer_calls: AtomicU64,
    debug_calls: AtomicU64,
}

impl ServiceApi {
    pub fn new(inner: Classifier, settings: ApiSettings) -> Result<Self> {
        if let OutputMode::TopkSoft(k) | OutputMode::TopkHard(k) = settings.output_mode {
            if k == 0 || k > inner.arch().classes {
                return Err(Error::Config(format!(
                    "top-k of {k} invalid for {} classes",
                    inner.arch().classes
                )));
            }
        }
        if let Robustness::Quantize(levels) = settings.robustness {
            if levels < 2 {
                return Err(Error::Config("quantize needs at least 2 levels".into()));
            }
        }
        Ok(ServiceApi {
            inner,
            settings,
            train_calls: AtomicU64::new(0),
            infer_calls: AtomicU64::new(0),
            debug_calls: AtomicU64::new(0),
        })
    }

    pub fn settings(&self) -> &ApiSettings {
        &self.settings
    }

    pub fn output_mode(&self) -> OutputMode {
        self.settings.output_mode
    }

    pub fn price_per_call(&self) -> f64 {
        self.settings.price_per_call
    }

    /// Number of classes in the service label space (public metadata).
    pub fn classes(&self) -> usize {
        self.inner.arch().classes
    }

    /// Expected flattened input length (public metadata).
    pub fn input_dim(&self) -> usize {
        self.inner.arch().input_dim
    }

    pub fn train_calls(&self) -> u64 {
        self.train_calls.load(Ordering::SeqCst)
    }

    pub fn infer_calls(&self) -> u64 {
        self.infer_calls.load(Ordering::SeqCst)
    }

    pub fn debug_calls(&self) -> u64 {
        self.debug_calls.load(Ordering::SeqCst)
    }

    /// Simulated cost so far: metered calls times price per call.
    pub fn cost(&self) -> f64 {
        (self.train_calls() + self.infer_calls()) as f64 * self.settings.price_per_call
    }

    fn preprocess(&self, image: &Tensor) -> Result<Tensor> {
        if image.numel() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "service expects {} pixels, got {}",
                self.input_dim(),
                image.numel()
            )));
        }
        image.check_finite("service input")?;
        match self.settings.robustness {
            Robustness::None => Ok(image.clone()),
            Robustness::Quantize(levels) => {
                let steps = (levels - 1) as f64;
                let data = image
                    .data()
                    .iter()
                    .map(|&v| (v.clamp(0.0, 1.0) * steps).round() / steps)
                    .collect();
                Tensor::new(image.shape().to_vec(), data)
            }
        }
    }

    fn inner_probs(&self, image: &Tensor) -> Result<Tensor> {
        let prepped = self.preprocess(image)?;
        let flat = Tensor::from_vec(prepped.data().to_vec());
        softmax(&self.inner.forward_one(&flat)?)
    }

    /// One metered prediction. Applies robustness preprocessing, runs the
    /// frozen inner model, truncates per the output mode.
    pub fn predict(&self, image: &Tensor, phase: Phase) -> Result<ApiResponse> {
        let probs = self.inner_probs(image)?;
        match phase {
            Phase::Train => self.train_calls.fetch_add(1, Ordering::SeqCst),
            Phase::Infer => self.infer_calls.fetch_add(1, Ordering::SeqCst),
        };
        Ok(match self.settings.output_mode {
            OutputMode::Full => ApiResponse::Full(probs),
            OutputMode::TopkSoft(k) => ApiResponse::TopkSoft(top_k(&probs, k)),
            OutputMode::TopkHard(k) => {
                ApiResponse::TopkHard(top_k(&probs, k).into_iter().map(|(c, _)| c).collect())
            }
        })
    }

    /// Raw logits before softmax. Only available when the settings enable
    /// it; does not touch the cost meter, counts on the debug counter.
    pub fn debug_logits(&self, image: &Tensor) -> Result<Tensor> {
        if !self.settings.debug_logits_enabled {
            return Err(Error::Capability(
                "debug logits are disabled on this service".into(),
            ));
        }
        let prepped = self.preprocess(image)?;
        self.debug_calls.fetch_add(1, Ordering::SeqCst);
        let flat = Tensor::from_vec(prepped.data().to_vec());
        self.inner.forward_one(&flat)
    }
}

/// Top-k (class, prob) pairs sorted by probability descending, smaller
/// class index first on exact ties.
fn top_k(probs: &Tensor, k: usize) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = probs.data().iter().cloned().enumerate().collect();
    pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    pairs.truncate(k);
    pairs
}
