use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

/// Instantaneous harvester state.
///
/// The same layout doubles as the time derivative returned by the right-hand
/// side functions, in which case `phi` holds the excitation frequency.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HarvesterState {
    /// Excitation phase, rad, kept in `[0, 2π)`.
    pub phi: f64,
    /// Driven-magnet angle, rad.
    pub theta: f64,
    /// Angular velocity, rad/s.
    pub theta_dot: f64,
    /// Induced current, A.
    pub i: f64,
    /// Actuator position, m. Zero unless the spring actuator is in use.
    pub x: f64,
}

impl HarvesterState {
    pub const DIM: usize = 5;

    pub fn new(phi: f64, theta: f64, theta_dot: f64, i: f64) -> Self {
        Self {
            phi: wrap_phase(phi),
            theta,
            theta_dot,
            i,
            x: 0.0,
        }
    }

    /// Builds a state from the `[θ, θ̇, i]` triple used for initial conditions.
    pub fn from_ic(ic: [f64; 3], phi: f64) -> Self {
        Self::new(phi, ic[0], ic[1], ic[2])
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.phi, self.theta, self.theta_dot, self.i, self.x]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            phi: a[0],
            theta: a[1],
            theta_dot: a[2],
            i: a[3],
            x: a[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn with_wrapped_phase(mut self) -> Self {
        self.phi = wrap_phase(self.phi);
        self
    }

    /// The four variables the attractor classifier sees.
    pub fn features(&self) -> [f64; 4] {
        [self.phi, self.theta, self.theta_dot, self.i]
    }
}

/// Maps any finite angle into `[0, 2π)`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}
