//! Tensors, a reverse-mode autodiff tape and the layers built on it.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod lora;
pub mod ops;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{BlockConfig, Mode};
pub use lora::LoraConfig;
pub use params::{Init, Param, ParamSpec, ParamStore};
pub use tensor::{Scalar, Tensor};
