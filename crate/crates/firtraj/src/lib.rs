//! Synthetic far-infrared deer scenarios, multi-stream trajectory
//! forecasting and time-to-collision warnings.
//!
//! The crate is organized around the stages of a nighttime animal-collision
//! warning stack:
//!
//! - [`synth`] renders deterministic thermal-style scenarios (frames,
//!   annotations, odometry, ground-truth optical flow) from closed-form
//!   world models;
//! - [`perception`] detects deer and classifies their preliminary risk;
//! - [`flow`] estimates dense optical flow and pools it inside boxes;
//! - [`egomotion`] forecasts the camera vehicle's planar motion;
//! - [`model`] is the multi-stream encoder-decoder forecaster with its
//!   tape-based differentiation and SGD training loop;
//! - [`metrics`] scores forecasts (ADE/FDE) and derives time-to-collision;
//! - [`pipeline`] runs the per-frame detect - track - predict - warn loop
//!   behind the command line in [`cli`].

pub mod cli;
pub mod data;
pub mod egomotion;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod perception;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
