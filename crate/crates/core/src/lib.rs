//! Pedestrian localization in a roadside camera frame from phone-only sensor data.
//!
//! The crate covers the whole pipeline: geodetic and camera geometry, extrinsic
//! calibration from surveyed reference points, a synthetic scene simulator,
//! fixed-shape windowing of sensor streams, a small neural substrate with exact
//! gradients, the cross-modal GAN itself, GPS and particle-filter baselines, the
//! association-based self-training loop, and the evaluation harnesses.

pub mod baselines;
pub mod calib;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gan;
pub mod geodesy;
pub mod nn;
pub mod rng;
pub mod selftrain;
pub mod sim;

pub use error::{Error, Result};
