//! Simulation of displaced patch parallelism for diffusion-model inference.
//!
//! A toy U-Net noise predictor is executed by `N` simulated devices, each
//! owning one horizontal band of the image. Devices either exchange fresh
//! activations synchronously or reuse the previous denoising step's
//! activations as context while their own gathers run in the background. A
//! discrete cost model turns the recorded per-device programs into timelines.

pub mod cost;
pub mod error;
pub mod harness;
pub mod rng;
pub mod runtime;
pub mod sampler;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Region, Tensor};
