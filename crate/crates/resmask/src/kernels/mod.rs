//! Tape-free numeric kernels. Each submodule pairs a forward routine with the
//! matching gradient routine; the autodiff tape dispatches into these.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d_backward, conv2d_im2col, conv2d_naive, conv_out_size, ConvGeom};
pub use loss::{cross_entropy, cross_entropy_backward, log_softmax_rows, softmax_rows};
pub use norm::{bn_eval, bn_eval_backward, bn_train, bn_train_backward, BnTrainOut};
pub use pool::{
    global_avgpool, global_avgpool_backward, maxpool2d, maxpool2d_backward, upsample_to,
    upsample_to_backward, PoolGeom,
};
