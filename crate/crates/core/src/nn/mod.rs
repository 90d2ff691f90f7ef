//! Convolutions, normalisation, activations and resampling.

mod conv;
mod deform;
mod gate;
mod norm;
mod resample;

pub use conv::ConvGeometry;
pub use deform::bilinear_sample;
pub use norm::{ema_update, BatchMoments, BatchNormState, BnMode};

/// Negative slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;
