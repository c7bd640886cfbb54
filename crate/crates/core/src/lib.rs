pub mod autograd;
pub mod bench;
pub mod cli;
pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod media;
pub mod motref;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelParams32 = params::ModelParams<f32>;
pub type ModelParams64 = params::ModelParams<f64>;
pub type NoiseSchedule32 = diffusion::NoiseSchedule<f32>;
pub type NoiseSchedule64 = diffusion::NoiseSchedule<f64>;
