//! HBFormer: a hybrid windowed-attention encoder with a multi-scale
//! feature-fusion decoder for 2-D medical image segmentation, built on a
//! small reverse-mode autodiff engine.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod layers;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{Init, Module, ParamSpec, ParamStore, Session, SessionOutput};
pub use scalar::Scalar;
pub use tensor::Tensor;
