//! Semantic image translation by guiding the reverse process of an
//! unconditional diffusion model.
//!
//! The crate is organised around the data flow of a single translation run:
//!
//! - [`schedule`]: noise schedules and the closed-form forward/reverse
//!   transitions, Tweedie denoising and the manifold-constrained correction.
//! - [`score`]: the noise-prediction model interface plus analytic and
//!   trainable toy implementations.
//! - [`extractors`]: structure/semantic feature extractors, text-image
//!   embedders and differentiable augmentations.
//! - [`guidance`]: the structure, style and regularisation losses together
//!   with their gradients.
//! - [`sampler`]: the guided reverse loop with resampling and restarts.
//! - [`metrics`]: SFID/CSFID statistics and perceptual distances.
//! - [`color`]: moment-based colour transfer used as a post-process.
//!
//! Data-parallel kernels run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise; see [`par`].

pub mod color;
pub mod error;
pub mod extractors;
pub mod guidance;
pub mod image;
pub mod io;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod toy;

pub use error::{Error, Result};
pub use image::Image;
pub use par::Parallelism;
pub use schedule::{NoiseSchedule, VarianceRule};
