pub mod attack;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod frequency;
pub mod linalg;
pub mod net;
pub mod perfmodel;
pub mod pipeline;
pub mod privacy;
pub mod rng;
pub mod scalar;

mod binio;

pub use error::{Error, Result};
pub use linalg::{EigenDecomposition, Matrix};
pub use rng::RngStream;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Texture32 = frequency::Texture<f32>;
pub type Texture64 = frequency::Texture<f64>;
pub type ComponentSet32 = frequency::ComponentSet<f32>;
pub type ComponentSet64 = frequency::ComponentSet<f64>;
pub type NoiseCalibration32 = privacy::NoiseCalibration<f32>;
pub type NoiseCalibration64 = privacy::NoiseCalibration<f64>;
