pub mod cli;
pub mod error;
pub mod experiment;
pub mod gemm;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use gemm::{mat_mul_into, Scalar};
