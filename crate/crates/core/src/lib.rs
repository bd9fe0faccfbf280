//! Hybrid quantum-classical denoising diffusion engine.
//!
//! The classical pipeline runs on a small reverse-mode autodiff tape ([`autodiff`]); the
//! quantum bottleneck is an exact statevector simulation ([`quantum`]) differentiated with the
//! parameter-shift rule and spliced into the tape as a custom function.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod quantum;
pub mod rng;
pub mod tensor;
pub mod unet;

pub use autodiff::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use params::{GradSet, ParamSet};
pub use tensor::Tensor;
