//! Minimal differentiable layer stack used by every learned component.
//!
//! Parameters of a [`Network`] live in one flat `Vec<f64>`; gradients and
//! optimizer moments use the same layout, so the optimizer and the weight
//! files never need to know about layer structure.

mod adam;
mod io;
mod linalg;
mod loss;
mod network;
mod tensor;
mod transformer;

pub use adam::{AdamConfig, AdamState};
pub use io::{read_weights, write_weights, WeightSection};
pub use loss::{cross_entropy, log_softmax, mse, mse_grad, softmax, triplet_margin, triplet_margin_grad, TripletGrad};
pub use network::{Activation, Forward, LayerSpec, Mode, Network, NetworkSpec, Tape};
pub use tensor::Tensor;
