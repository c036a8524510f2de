//! Role-separated controller/workspace transformer for ARC-style grid
//! reasoning: data model, invertible augmentation, a small reverse-mode
//! numeric core, the model itself, training (offline + test-time), and
//! multi-view voting inference.


pub mod arcdata;
pub mod augment;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod mask;
pub mod model;
pub mod params;
pub mod recurrence;
pub mod tensor;
pub mod train;

pub use arcdata::{grid_equal, parse_task, serialize_task, synth_task, Grid, SynthFamily, Task};
pub use augment::{apply, enumerate_views, invert_hard, invert_logits, sample_aug, AugParams, Canvas};
pub use error::{Error, Result};
pub use mask::{build_mask, AttentionMask, Variant};
pub use model::{Model, ModelConfig, TaskToken};
pub use params::ParamStore;
pub use tensor::{NodeId, Tape};
pub use train::{TrainConfig, TttStrategy};
pub use infer::{evaluate, EvalOptions, EvalReport};
