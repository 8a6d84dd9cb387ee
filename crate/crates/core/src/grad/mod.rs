//! Parameter network, the differentiable loss pipeline and the optimizer.
//!
//! Gradients are hand-derived. They flow from the loss through the
//! interpolated grid densities into the analytic log-densities at each base
//! draw, then through the head activations and the hidden layers. Grid and
//! sample positions, KDE target densities, the target network and the greedy
//! action are held constant.

mod adam;
mod network;
mod pipeline;

pub use adam::{sgd_adam_step, sync_target, AdamState, BETA1, BETA2, EPSILON};
pub use network::{GradientSet, NetworkDims, NetworkParams, MIN_G_MAX, TENSOR_NAMES};
pub use pipeline::{
    build_context, context_loss_and_grad, frozen_batch_loss, frozen_loss, loss_and_grad, LossConfig, LossContext,
    MAX_LOG_DENSITY,
};
