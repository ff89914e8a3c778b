//! Multi-scale implicit neural video representation: fit a grid encoder and
//! convolutional decoder to a clip, then quantize and entropy-code the weights.

pub mod bytes;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod plot;
pub mod render;
pub mod run;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod video_io;

pub use config::{RunConfig, Variant};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
