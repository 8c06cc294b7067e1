//! Adaptive-depth transformer at desk scale.
//!
//! A dynamic-depth transformer encoder whose per-input depth is chosen by a
//! two-layer control mechanism: a gradient-boosted complexity predictor over
//! shallow features and a PPO-trained recurrent controller over mid-level
//! features. Inference runs through precompiled static execution plans served
//! from a probability-driven buffer pool, and a theory module verifies the
//! expected-FLOPs convergence bound by closed form and Monte Carlo.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod controller;
pub mod data;
pub mod engine;
pub mod error;
pub mod features;
pub mod opt;
pub mod predictor;
pub mod report;
pub mod svd;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use backbone::{BackboneConfig, BackboneParams};
pub use checkpoint::Checkpoint;
pub use controller::{PolicyParams, PpoConfig, Trajectory};
pub use data::{Dataset, DatasetRecord, Difficulty};
pub use engine::{BufferPool, DepthDistribution, ExecutionPlan};
pub use error::{CoreError, Result};
pub use features::{ExtractorConfig, ExtractorParams};
pub use predictor::{DepthLabel, GbtConfig, GbtModel};
pub use tensor::Tensor;
pub use theory::BoundParams;
pub use trainer::TrainConfig;
