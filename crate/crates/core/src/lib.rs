pub mod ann;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod exit;
pub mod layer;
pub mod opcount;
pub mod pipeline;
pub mod quant;
pub mod rl;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::{conv2d_forward, linear_forward, BatchNorm, Conv2d, Layer, Linear, Pool2d};
pub use tensor::{argmax, softmax, Tensor};
