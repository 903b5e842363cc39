//! Small dense neural-network engine: NCHW tensors, 3x3 convolutions,
//! pooling, batch normalization, dropout, dense layers, a softmax
//! cross-entropy head, Adam, and a finite-difference gradient checker.

pub mod adam;
pub mod checkpoint;
mod fpmode;
pub mod gradcheck;
pub mod layers;
pub mod network;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use fpmode::FlushDenormals;
pub use layers::{Layer, LayerSpec, Mode};
pub use network::{softmax_xent, Gradients, Network, Trace};
pub use real::{gemm, Real};
pub use tensor::Tensor;
