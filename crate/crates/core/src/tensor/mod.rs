//! Minimal dense tensor engine: forward ops and their vector-Jacobian products.

mod batchnorm;
mod conv;
mod dropblock;
mod ops;
mod param;
mod rng;
#[allow(clippy::module_inception)]
mod tensor;

pub use batchnorm::{
    batchnorm2d, batchnorm2d_vjp, BatchNormCache, BatchNormGrads, RunningStats, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d, conv2d_vjp, conv_transpose2d, conv_transpose2d_vjp, ConvGrads};
pub(crate) use conv::gemm;
pub use dropblock::{dropblock, dropblock_vjp, seed_rate as dropblock_seed_rate, DropMask};
pub use ops::{concat_channels, relu, relu_vjp, softmax_channels, softmax_channels_vjp, split_channels};
pub use param::ParamTensor;
pub use rng::RngStream;
pub use tensor::Tensor4;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
