//! Training-free stabilizers for diffusion latents.
//!
//! * [`microclamp`]: global per-sample quantile clamp (hard or tanh).
//! * [`aqclip`]: adaptive per-tile quantile soft clip driven by a confidence
//!   map, with EMA smoothing across denoising steps and seam-free
//!   overlap-add reassembly.
//! * [`harness`]: synthetic latents, stability metrics, a multi-step
//!   simulation loop and throughput benchmarks.

pub mod aqclip;
pub mod confidence;
pub mod error;
pub mod harness;
pub mod microclamp;
pub mod npy;
pub mod presets;
pub mod session;
pub mod stats;
pub mod tensor;
pub mod tiler;

pub use error::{Error, Result};
pub use tensor::{Dtype, LatentTensor, Shape};
