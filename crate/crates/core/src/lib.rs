//! Simulation and estimation pipeline for camera-assisted beam steering and
//! tracking of UAVs by an integrated sensing and communication base station.

pub mod analysis;
pub mod beamspace;
pub mod bounds;
pub mod dsp;
pub mod echo;
mod error;
pub mod estimators;
pub mod harness;
pub mod scan;
pub mod scenario;

pub use bounds::AngleBounds;
pub use error::{CoreError, Result};
