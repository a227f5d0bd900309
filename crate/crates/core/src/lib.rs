//! Self-supervised restoration of hyperspectral cubes by a reverse diffusion
//! chain whose denoiser is an untrained spatio-spectral generator, refitted to
//! the current iterate at every step.

pub mod cli;
pub mod cube;
pub mod degradation;
pub mod error;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod vs2m;

pub use cube::{Dims, HsiCube, RangeTag};
pub use degradation::{DegradationOperator, NoiseSpec};
pub use error::{Error, Result};
pub use schedule::{DiffusionSchedule, SigmaConvention};
