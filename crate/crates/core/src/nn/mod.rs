//! Minimal CPU tensor engine: NCHW tensors, a reverse-mode tape, the layers
//! the segmentation network needs, and Adam.

mod conv;
pub mod float;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use float::Float;
pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use layers::{BatchNorm2d, Conv2d, DropBlock, Param, ParamId, ParamStore, Session};
pub use optim::{Adam, AdamConfig};
pub use tensor::{FeatureMap, Shape, Tensor};
