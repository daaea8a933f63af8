//! Desk-scale experiments: synthetic tasks with controlled domain shift,
//! long-tail and few-shot resampling, backbone pretraining, the tuning
//! protocols, and the input/output prompt asymmetry check.

mod data;
mod prop1;
mod protocol;
mod sampling;
mod shift;

pub use data::{make_blobs, make_glyphs, BlobConfig, Dataset, GlyphConfig, Split, GLYPH_SIDE};
pub use prop1::{verify_proposition1, Prop1Config, Prop1Report, INPUT_SIDE_MAX, OUTPUT_SIDE_MIN};
pub use protocol::{
    pretrain_backbone, run_protocol, DatasetKind, PretrainConfig, Pretrained, Protocol, ProtocolConfig, ProtocolResult,
    ProtocolRun, Task, TaskSpec, TunedModel,
};
pub use sampling::{fewshot_indices, longtail_count, longtail_indices, resample_fewshot, resample_longtail};
pub use shift::{apply_shift, ShiftKind, ShiftSpec, MIN_ABS_DET};
