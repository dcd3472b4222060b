//! Layer-level neural-network machinery: tensors, sequential networks with
//! recorded gradient tapes, losses and optimizers.

pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use layers::{LayerSpec, ParamSlot};
pub use loss::{bernoulli_nll, Likelihood};
pub use network::{GradientTape, Grads, Mode, Network, Param, ParamKind, ParamStore};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
