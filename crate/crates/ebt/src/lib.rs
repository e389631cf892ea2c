//! Audio-driven face reenactment on synthetic data: differentiable
//! building blocks, a fittable face model, feature extraction, neural
//! mapping networks, frame composition, and the pipeline that ties the
//! stages together.

pub mod a2e;
pub mod error;
pub mod face;
pub mod idrm;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod audio;
pub mod rng;
pub mod synth;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
