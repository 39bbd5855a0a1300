//! A deliberately small numeric kernel for training convolutional recurrent
//! networks on the CPU.
//!
//! There is no autodiff graph here. Every operation comes as a forward
//! function plus a matching `*_backward` function that maps an upstream
//! gradient to gradients of the inputs and parameters; callers that need
//! backpropagation through time store whatever the backward pass needs.
//!
//! Tensors are dense `f64` arrays laid out row-major as `channels × height ×
//! width`. Convolution is cross-correlation (no kernel flip).

pub mod activation;
pub mod adam;
pub mod conv;
pub mod convlstm;
mod error;
mod gemm;
pub mod gradcheck;
pub mod loss;
pub mod resize;
mod tensor;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, tanh, tanh_backward};
pub use adam::{Adam, AdamConfig};
pub use conv::{conv2d, conv2d_backward, Conv2dGrads, Padding};
pub use convlstm::{
    convlstm_backward, convlstm_backward_gates, convlstm_forward,
    convlstm_forward_with_input_term, convlstm_step, ConvLstmCache, ConvLstmGrads,
    ConvLstmState, ConvLstmWeights, GateGrads,
};
pub use error::{NnError, Result};
pub use gradcheck::grad_check;
pub use loss::{logistic_loss, softmax_ce};
pub use resize::{
    bilinear_up2, bilinear_up2_backward, concat_channels, maxpool2, maxpool2_backward,
    split_channels,
};
pub use tensor::Tensor;
