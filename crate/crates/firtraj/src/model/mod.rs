//! Multi-stream trajectory forecaster: a recurrent encoder per input
//! stream (past boxes, pooled flow, scene context), MLP fusion, and a
//! noise-conditioned recurrent decoder trained with a best-of-K variety
//! loss. Differentiation is handled by the local [`tape`] module.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod tape;
pub mod train;
pub mod windows;

pub use net::{
    ModelConfig, ModelParams, ObservationWindow, Precision, Preset, StreamSet, TrajectoryForecast,
};
pub use windows::PreparedWindow;
