//! Error-bounded lossy compression of 3D scientific fields, with a small
//! per-field convolutional enhancer that learns the residual left by the
//! baseline codec.

pub mod bitio;
pub mod codec;
pub mod field;
pub mod net;
pub mod container;
pub mod outlier;
pub mod metrics;
pub mod pipeline;
pub mod analysis;
