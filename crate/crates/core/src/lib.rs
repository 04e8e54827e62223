//! Zero-shot diffusion restoration for linear inverse problems.
//!
//! The sampler regenerates only the null-space component of the image
//! (the range space is pinned to `A† y`) and can skip its early steps by
//! starting from an approximate noisy input built from the measurement.
//! Closed-form Gaussian and Gaussian-mixture denoisers make every stage
//! verifiable without a trained network.

pub mod bridge;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod operators;
pub mod qbm;
pub mod restoration;
pub mod schedule;
pub mod synthetic;
pub mod tensor;

pub use denoiser::{
    Denoiser, DenoiserHandle, DenoiserSpec, GaussianComponent, GaussianMixturePrior,
    OracleDenoiser, ZeroDenoiser,
};
pub use error::{Error, Result};
pub use operators::{DegradationOperator, OperatorSpec};
pub use qbm::{CalibrationOptions, CalibrationReport};
pub use restoration::{restore, Restoration, RestorationConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use tensor::{ImageTensor, Shape};
