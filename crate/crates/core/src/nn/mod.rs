//! Parameters, layers, the bottleneck backbone, patch cropping, optimizers
//! and checkpoints.

mod backbone;
pub mod checkpoint;
mod layers;
mod optim;
mod params;
mod patches;

pub use backbone::{Backbone, BackboneConfig, Bottleneck};
pub use layers::{fan_in_uniform, Conv, FcStack, Linear};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use params::{Grads, ParamGroup, ParamId, ParamStore, Session};
pub use patches::{extract_patches, patch_batch, PatchGeometry};
