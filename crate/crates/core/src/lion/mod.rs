//! Prompt-tuned classifier: frozen backbone, input and representation prompt
//! blocks with blending gates, projection and head.

mod backbone;
mod complexity;
mod gate;
mod model;

pub use backbone::{mean_loss, Affine, Backbone, BackboneTrace, Classifier, TuneMode};
pub use complexity::{param_count_report, ParamCountRow};
pub use gate::{GatePair, GATE_LOGIT_LIMIT};
pub use model::{PromptConfig, PromptModel, GATE_INIT};
