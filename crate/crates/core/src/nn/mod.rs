//! Minimal double-precision network substrate: tensors, layer kernels with
//! analytic backward passes, SGD, gradient checking and checkpoints.

pub mod checkpoint;
mod gradcheck;
mod layer;
pub mod ops;
mod optim;
pub mod sequential;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_terms, relative_error, GradCheckConfig, GradCheckReport};
pub use layer::{glorot_bound, LayerKind, LayerParams, ParamGroup};
pub use ops::{
    bilinear_resize, bilinear_resize_backward, concat_channels, conv3x3_backward, conv3x3_forward,
    dense_backward, dense_forward, log_sum_exp, maxpool_backward, maxpool_forward, softmax,
    softmax_cross_entropy, split_channels, LayerGrads,
};
pub(crate) use optim::join;
pub use optim::{sgd_step, GradBuffer, GroupRates, Momentum, Parameterized};
pub use tensor::Tensor;

/// Convenience wrapper: max-pool output without the argmax record.
pub fn maxpool(input: &Tensor, window: usize, stride: usize) -> crate::Result<Tensor> {
    Ok(maxpool_forward(input, window, stride)?.output)
}
