//! A desk-scale laboratory for masked discrete diffusion language models with
//! interchangeable denoiser backbones: bidirectional selective-scan SSM,
//! bidirectional attention, and hybrid interleavings. Trains tiny models,
//! samples via the multi-token reverse process, and measures how decoding
//! latency and throughput scale with sequence length across backbones.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
