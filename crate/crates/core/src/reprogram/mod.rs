//! Input transformations (padding border, masked watermark), label
//! mappings bridging source and target class spaces, first-order prompt
//! training on the primed local model, and cost-free inference.

mod foo;
mod labelmap;
mod prompt;

pub use foo::{infer, test_accuracy, train_prompt_foo, FooOutcome, VrConfig};
pub use labelmap::{blm_fit, flm_fit, LabelMap, MapKind};
pub use prompt::{embed_center, PaddingPrompt, Prompt, PromptGeometry, PromptKind, WatermarkPrompt};
