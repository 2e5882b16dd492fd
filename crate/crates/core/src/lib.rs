//! Differentiable search over temporal-convolution cells and the grouped
//! NAS-TC layers built from them.

pub mod audit;
pub mod autodiff;
pub mod cell;
pub mod config;
pub mod data;
pub mod desk;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod search;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autodiff::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use genotype::Genotype;
pub use network::{Network, NetworkConfig, Task};
pub use ops::OpKind;
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
