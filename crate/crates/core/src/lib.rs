//! Simulation, attractor analysis and learned attractor-switching control for
//! a magnetically coupled nonlinear vibration energy harvester.

pub mod attractor;
pub mod classifier;
pub mod controllers;
pub mod ddpg;
pub mod dynamics;
pub mod experiment;
pub mod error;
pub mod integrator;
pub mod nn;
pub mod state;

pub use dynamics::{ControlMode, HarvesterParams};
pub use error::{Error, Result};
pub use state::HarvesterState;
