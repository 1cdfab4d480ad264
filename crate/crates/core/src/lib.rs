//! Simulation and end-to-end training of wideband phase–time array
//! localization.
//!
//! A transmit array with per-antenna phase shifters and true-time delays
//! sends one OFDM symbol whose beam sweeps across space with frequency. Each
//! user reports its strongest subcarrier and the power measured there, and a
//! small MLP turns that pair into a position. The beam and the MLP are
//! trained jointly through a reverse-mode autodiff tape.

pub mod autodiff;
pub mod beamformer;
pub mod cbs;
pub mod config;
pub mod dataset;
pub mod estimator;
pub mod experiments;
pub mod error;
pub mod feedback;
pub mod geometry;
pub mod trainer;

pub use config::{derive_grids, AngleConvention, DerivedGrids, SystemConfig};
pub use error::{Error, Result};
pub use geometry::UserPosition;
