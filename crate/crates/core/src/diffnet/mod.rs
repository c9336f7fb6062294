//! Small reverse-mode autodiff engine with second-order support, and the 3D
//! CNN built on it.

mod checkpoint;
mod kernels;
mod model;
mod tape;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{
    build_model, cross_entropy, cross_entropy_graph, forward, input_gradient, log_softmax, penalty_param_gradient,
    Activation, BatchStats, ForwardPass, LayerSpec, Mode, ModelParams, ModelSpec, PredictionDist,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
