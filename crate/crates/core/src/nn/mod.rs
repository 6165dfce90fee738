//! Differentiable layers: convolution, pooling, batch norm, the dense head
//! and the classification loss.

pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv_backward, conv_forward, ConvGrads, ConvPath, ConvSpec};
pub use linear::fully_connected;
pub use loss::{softmax, softmax_cross_entropy};
pub use norm::{batch_norm, BatchNormConfig, BatchNormOutput, Mode, BN_EPSILON, BN_MOMENTUM};
pub use pool::{avg_pool, avg_pool_backward, global_avg_pool, PoolSpec};
