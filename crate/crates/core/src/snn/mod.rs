//! Spiking network model: LIF dynamics, unrolled forward, STBP backward.

pub mod backward;
pub mod forward;
pub mod lif;
pub mod loss;
pub mod network;

pub use backward::{stbp_backward, Gradients};
pub use forward::{forward_unroll, predict, relaxed_forward, FireMode, ForwardCache};
pub use lif::{heaviside, lif_step, smooth_spike, surrogate_derivative, LifParams, LifState};
pub use loss::{loss_mse, loss_mse_grad, one_hot, LossKind};
pub use network::{Architecture, Layer, LayerKind, LayerSpec, SpikingNetwork, DEFAULT_MIN_PRUNABLE};
