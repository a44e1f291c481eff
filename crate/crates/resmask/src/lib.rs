//! A self-contained deep-learning engine for facial expression recognition.
//!
//! Everything numeric is implemented in this crate: dense tensors over f32/f64,
//! reverse-mode automatic differentiation on a tape, the convolution /
//! pooling / normalization kernels, a residual network with attention masking
//! branches, SGD training with plateau scheduling, and saliency-map rendering.
//! External crates are used only for plumbing (CLI parsing, serialization,
//! error derives).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod net;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use net::{build_network, Mode, Network, NetworkSpec, ParamStore, StageSpec};
pub use rng::Rng;
pub use tape::{fuse_residual_mask, grad_leaf, Gradients, ParamId, Tape, Value};
pub use tensor::{Scalar, Tensor};
