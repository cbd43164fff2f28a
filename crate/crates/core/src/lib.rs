//! Laboratory for off-manifold robustness of small classifiers.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod lab;
pub mod linalg;
pub mod metrics;
pub mod mnist;
pub mod models;
pub mod scalar;
pub mod stats;
pub mod tangent;
pub mod tensor;
pub mod train;
pub mod worlds;

pub use data::Dataset;
pub use error::{Error, Result};
pub use models::{Activation, ClassSelector, Model, OutputSpace};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use worlds::{Projector, World};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Projector64 = Projector<f64>;
