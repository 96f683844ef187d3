pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod profiler;
pub mod gradcheck;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases used by training, evaluation and the tools.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Model = model::EffLocModel<f64>;
pub type Quaternion = geometry::UnitQuaternion<f64>;
pub type Pose = geometry::Pose<f64>;
pub type TrajectoryStats = geometry::TrajectoryStats<f64>;

/// Single-precision aliases for inference.
pub type TensorF32 = tensor::Tensor<f32>;
pub type ModelF32 = model::EffLocModel<f32>;
