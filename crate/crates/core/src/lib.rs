//! Grouped-query attention variants, a small Vision Transformer to host them,
//! and the training, conversion, analysis and checkpoint tooling around it.

pub mod allocation;
pub mod analysis;
pub mod attention;
pub mod convert;
pub mod data;
pub mod error;
pub mod model;
pub mod persistence;
pub mod rng;
pub mod tensor;
pub mod train;

pub use allocation::{AllocationEvent, AllocationVector, CacheMode, HeadNorms, NormCache};
pub use attention::{AttentionVariantConfig, Variant};
pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{ViT, ViTConfig, ViTParams};
pub use persistence::Checkpoint;
pub use tensor::{Precision, Tensor};
pub use train::{RunMetrics, TrainConfig};
