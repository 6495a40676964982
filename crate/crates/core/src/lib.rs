//! Dual-encoder retinal vessel segmentation.
//!
//! The crate covers the whole pipeline: dataset ingestion ([`imaging`]),
//! mask-similarity data balancing ([`jesb`]), reference color-statistics
//! augmentation ([`csa`]), the high-frequency domain-invariant input
//! ([`invariant`]), the network itself ([`model`]) on a small CPU autograd
//! engine ([`nn`]), training ([`train`]) and FOV-restricted evaluation
//! ([`eval`]).

pub mod config;
pub mod csa;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod invariant;
pub mod jesb;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod train;

pub use config::PipelineConfig;
pub use csa::ChannelStats;
pub use error::{Error, Result};
pub use eval::{ConfusionCounts, MetricsReport};
pub use imaging::{BinaryMask, ColorImage, FundusSample, GrayField};
pub use manifest::RunManifest;
pub use model::{DeffaNet, ModelConfig};
pub use nn::{FeatureMap, Shape, Tensor};
