//! Decoy-state BB84 faint-pulse source toolkit: analytic key-rate model,
//! per-pulse Monte Carlo, timetag stream processing and side-channel
//! leakage accounting.

pub mod decoy;
pub mod entropy;
pub mod model;
pub mod montecarlo;
pub mod sidechannel;
pub mod timetag;
