//! Forward kernels (and the matching backward kernels used by the tape).

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;

pub use activation::{activation, relu, sigmoid, sigmoid_scalar, Activation};
pub use conv::{conv1d, conv2d, conv_out_len, Conv1dSpec, Conv2dSpec};
pub use linear::linear;
pub use norm::{batchnorm, update_running, BatchNormOutput, BatchNormParams, BnMode, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use pool::{
    expand_segments, global_avg_pool, segment_avg_pool, segment_means, stats_pool, SegmentPooling, Segments,
    STATS_VAR_FLOOR,
};

pub(crate) use conv::{conv1d_backward, conv1d_forward, conv2d_backward, conv2d_forward, Conv1dGeom, Conv2dGeom};
pub(crate) use linear::{linear_backward, linear_dims, linear_forward};
pub(crate) use norm::batchnorm_backward;
