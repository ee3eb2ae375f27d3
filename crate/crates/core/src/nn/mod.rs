//! Minimal CPU neural-network toolkit: tensors, a differentiation tape,
//! the layer types the models need, and an Adam optimiser.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub(crate) use graph::conv_out;
pub use layers::{BatchNorm2d, Conv2d, Dense, Phase};
pub use optim::Adam;
pub use params::{Binding, ParamEntry, ParamId, ParamSet};
pub use tensor::Tensor;
