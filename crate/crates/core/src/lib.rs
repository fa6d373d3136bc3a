//! Pool-based active learning for molecular property prediction.

pub mod alloop;
pub mod analysis;
pub mod chemgraph;
pub mod dataio;
pub mod error;
pub mod fingerprint;
pub mod harness;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod seeding;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Mat32 = tensor::Mat<f32>;
pub type Tape32 = tensor::Tape<f32>;
pub type Prepared32 = alloop::Prepared<f32>;
pub type QueryingModule32 = nets::QueryingModule<f32>;
pub type TaskModel32 = nets::TaskModel<f32>;

/// Gradient-check precision.
pub type Mat64 = tensor::Mat<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type Prepared64 = alloop::Prepared<f64>;
pub type QueryingModule64 = nets::QueryingModule<f64>;
pub type TaskModel64 = nets::TaskModel<f64>;
