//! Stochastic simulation and demodulation for diffusion-based molecular
//! communication with spatially partitioned receivers.

pub mod demod;
pub mod error;
pub mod harness;
pub mod lna;
pub mod model;
pub mod ode;
pub mod presets;
pub mod reference;
pub mod scenario;
pub mod ssa;
pub mod stats;
pub mod statespace;

pub use error::Error;
