//! Minimal reverse-mode differentiable computation: the tape, layers,
//! losses, the optimizer, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod loss;
pub mod nn;
mod optim;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use graph::{Grads, Gradients, Graph, Var};
pub use nn::ParamView;
pub use optim::{adam_step, Adam};
pub use tensor::{xavier, Mat, ParameterSet, Tensor};
