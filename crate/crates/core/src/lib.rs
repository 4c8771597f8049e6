//! Calibration toolkit built around uncertainty-weighted training.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`]: dense matrices, stable softmax, one-hot labels and the seeded
//!   random stream every stochastic component draws from.
//! * [`losses`]: cross entropy, Brier loss, focal / dual focal loss, the
//!   generalized Brier Score (gBS) weight and its two placements: on the loss
//!   (BSCE) or detached on the gradient (BSCE-GRA).
//! * [`metrics`]: Brier Score, ECE, AdaECE, Classwise-ECE, histograms and
//!   Pearson correlation.
//! * [`calibrate`]: grid-searched temperature scaling.
//! * [`trainer`]: a small MLP with hand-written backpropagation and SGD.
//! * [`gaussbench`]: the 2-D Gaussian mixture benchmark with exact posteriors.

pub mod calibrate;
pub mod error;
pub mod gaussbench;
pub mod losses;
pub mod metrics;
pub mod numkit;
pub mod trainer;

pub use error::{Error, Result};
