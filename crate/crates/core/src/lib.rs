//! Diffusion model patching on a miniature diffusion transformer.

pub mod backbone;
pub mod datagen;
pub mod diffusion;
pub mod dmp;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use backbone::BackboneConfig;
pub use datagen::{Dataset, DatasetSpec};
pub use diffusion::{NoiseSchedule, SamplerConfig, ScheduleKind};
pub use dmp::{DmpConfig, Patch};
pub use error::{Error, Result};
pub use model::Model;
pub use numcore::{ParamStore, Rng, Tensor};
pub use trainer::{Checkpoint, Phase, TrainConfig};
