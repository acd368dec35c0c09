//! Coupled electromechanical equations of motion.
//!
//! The driven magnet obeys a torsional mass-spring-damper law forced by the
//! magnetic torque of a harmonically translating drive magnet, and is coupled
//! to a generator circuit through `gamma_em`. Three configurations share the
//! same mechanical core: uncontrolled, a linear actuator moving one spring
//! end, and an external voltage source replacing the load through a relay.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::HarvesterState;

/// Natural frequency printed alongside the primitive constants, rad/s.
pub const TABULATED_NATURAL_FREQUENCY: f64 = 70.25;
/// Residual flux density of both magnets, T.
pub const RESIDUAL_FLUX_DENSITY: f64 = 1.32;
/// Cylindrical magnet radius, m.
pub const MAGNET_RADIUS: f64 = 6.35e-3;
/// Cylindrical magnet height, m.
pub const MAGNET_HEIGHT: f64 = 12.7e-3;

/// Physical constants of the harvester, SI units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvesterParams {
    /// Moment of inertia of the driven magnet, kg·m².
    pub inertia: f64,
    /// Torsional damping, N·m·s/rad.
    pub damping: f64,
    /// Torsional stiffness, N·m/rad.
    pub stiffness: f64,
    /// Spring offset bias angle, rad.
    pub bias_angle: f64,
    /// Permeability of free space, H/m.
    pub permeability: f64,
    /// Drive magnet magnetization, A/m.
    pub drive_magnetization: f64,
    /// Driven magnet magnetization, A/m.
    pub driven_magnetization: f64,
    /// Drive magnet volume, m³.
    pub drive_volume: f64,
    /// Driven magnet volume, m³.
    pub driven_volume: f64,
    /// Excitation amplitude, m.
    pub amplitude: f64,
    /// Excitation angular frequency, rad/s.
    pub omega: f64,
    /// Horizontal bias between the magnets, m.
    pub horizontal_bias: f64,
    /// Vertical gap between the magnets, m.
    pub gap: f64,
    /// Generator inductance, H.
    pub inductance: f64,
    /// Generator resistance, Ω.
    pub generator_resistance: f64,
    /// Load resistance, Ω.
    pub load_resistance: f64,
    /// Electromechanical coupling, N·m/A (equivalently V·s/rad).
    pub gamma_em: f64,
}

impl Default for HarvesterParams {
    fn default() -> Self {
        let magnetization = 1.05e6;
        let volume = 1608.8e-9;
        Self {
            inertia: 1.11e-6,
            damping: 3.02e-6,
            stiffness: 5.48e-3,
            bias_angle: 0.0,
            permeability: 4.0 * PI * 1e-7,
            drive_magnetization: magnetization,
            driven_magnetization: magnetization,
            drive_volume: volume,
            driven_volume: volume,
            amplitude: 3e-3,
            omega: 50.24,
            horizontal_bias: 0.0,
            gap: 34e-3,
            inductance: 1.0,
            generator_resistance: 0.1,
            load_resistance: 5.0,
            gamma_em: 0.06,
        }
    }
}

fn require(name: &'static str, ok: bool, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: reason.to_string(),
        })
    }
}

impl HarvesterParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inertia", self.inertia),
            ("damping", self.damping),
            ("stiffness", self.stiffness),
            ("permeability", self.permeability),
            ("drive_magnetization", self.drive_magnetization),
            ("driven_magnetization", self.driven_magnetization),
            ("drive_volume", self.drive_volume),
            ("driven_volume", self.driven_volume),
            ("amplitude", self.amplitude),
            ("omega", self.omega),
            ("gap", self.gap),
            ("inductance", self.inductance),
        ];
        for (name, v) in positive {
            require(name, v.is_finite() && v > 0.0, "must be finite and > 0")?;
        }
        let non_negative = [
            ("generator_resistance", self.generator_resistance),
            ("load_resistance", self.load_resistance),
            ("gamma_em", self.gamma_em),
        ];
        for (name, v) in non_negative {
            require(name, v.is_finite() && v >= 0.0, "must be finite and >= 0")?;
        }
        require("bias_angle", self.bias_angle.is_finite(), "must be finite")?;
        require(
            "horizontal_bias",
            self.horizontal_bias.is_finite(),
            "must be finite",
        )?;
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    /// Magnetic constant μ0·M0·V0·M1·V1/(4π), N·m·m³.
    pub fn alpha(&self) -> f64 {
        self.permeability
            * self.drive_magnetization
            * self.drive_volume
            * self.driven_magnetization
            * self.driven_volume
            / (4.0 * PI)
    }

    /// Undamped natural frequency √(k/J), rad/s.
    pub fn natural_frequency(&self) -> f64 {
        (self.stiffness / self.inertia).sqrt()
    }

    /// Forcing period 2π/Ω, s.
    pub fn forcing_period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    /// Horizontal magnet offset `b + A·cos(Ω·t)`, m.
    pub fn horizontal_offset(&self, t: f64) -> f64 {
        self.horizontal_bias + self.amplitude * (self.omega * t).cos()
    }

    /// Magnetic torque on the driven magnet at angle `theta` and time `t`.
    pub fn magnetic_torque(&self, theta: f64, t: f64) -> f64 {
        self.magnetic_torque_at_offset(theta, self.horizontal_offset(t))
    }

    /// Magnetic torque for an explicit horizontal offset `d`.
    pub fn magnetic_torque_at_offset(&self, theta: f64, d: f64) -> f64 {
        let (sin, cos) = theta.sin_cos();
        let h = self.gap;
        let r2 = d * d + h * h;
        let r = r2.sqrt();
        let r3 = r2 * r;
        let r5 = r3 * r2;
        self.alpha() * (sin / r3 - 3.0 * d * (h * cos + d * sin) / r5)
    }

    /// Instantaneous power dissipated in the load, W.
    pub fn load_power(&self, s: &HarvesterState) -> f64 {
        s.i * s.i * self.load_resistance
    }

    fn angular_acceleration(&self, s: &HarvesterState, t: f64, external_torque: f64) -> f64 {
        let torque = self.magnetic_torque(s.theta, t);
        (torque - self.damping * s.theta_dot - self.stiffness * (s.theta - self.bias_angle)
            + self.gamma_em * s.i
            + external_torque)
            / self.inertia
    }

    /// Current derivative with the generator closed over the load.
    fn load_current_rate(&self, s: &HarvesterState) -> f64 {
        (-(self.generator_resistance + self.load_resistance) * s.i - self.gamma_em * s.theta_dot)
            / self.inductance
    }

    fn derivative(&self, s: &HarvesterState, theta_ddot: f64, di: f64, dx: f64) -> HarvesterState {
        HarvesterState {
            phi: self.omega,
            theta: s.theta_dot,
            theta_dot: theta_ddot,
            i: di,
            x: dx,
        }
    }

    /// Right-hand side of the free harvester.
    pub fn rhs_uncontrolled(&self, s: &HarvesterState, t: f64) -> Result<HarvesterState> {
        check_finite(s)?;
        let acc = self.angular_acceleration(s, t, 0.0);
        Ok(self.derivative(s, acc, self.load_current_rate(s), 0.0))
    }

    /// Right-hand side with actuator velocity `a` (m/s) moving one spring
    /// end. Two springs wound on a plate of radius `plate_radius` turn the
    /// displacement `x` into the torque `k·x/(2·r)`.
    pub fn rhs_spring(
        &self,
        s: &HarvesterState,
        t: f64,
        a: f64,
        plate_radius: f64,
        bound: f64,
    ) -> Result<HarvesterState> {
        check_finite(s)?;
        check_bound(a, bound)?;
        let spring_torque = self.stiffness / (2.0 * plate_radius) * s.x;
        let acc = self.angular_acceleration(s, t, spring_torque);
        Ok(self.derivative(s, acc, self.load_current_rate(s), a))
    }

    /// Right-hand side with the generator switched between the load
    /// (`connected == false`) and a supply of voltage `a`.
    pub fn rhs_voltage(
        &self,
        s: &HarvesterState,
        t: f64,
        connected: bool,
        a: f64,
        bound: f64,
    ) -> Result<HarvesterState> {
        check_finite(s)?;
        let di = if connected {
            check_bound(a, bound)?;
            (a - self.generator_resistance * s.i - self.gamma_em * s.theta_dot) / self.inductance
        } else {
            self.load_current_rate(s)
        };
        let acc = self.angular_acceleration(s, t, 0.0);
        Ok(self.derivative(s, acc, di, 0.0))
    }

    pub fn rhs(&self, mode: &ControlMode, s: &HarvesterState, t: f64) -> Result<HarvesterState> {
        match *mode {
            ControlMode::Uncontrolled => self.rhs_uncontrolled(s, t),
            ControlMode::SpringActuator {
                velocity,
                plate_radius,
                bound,
            } => self.rhs_spring(s, t, velocity, plate_radius, bound),
            ControlMode::MotorVoltage {
                connected,
                voltage,
                bound,
            } => self.rhs_voltage(s, t, connected, voltage, bound),
        }
    }
}

/// Which dynamics are active, together with the action held over a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlMode {
    Uncontrolled,
    SpringActuator {
        /// Actuator velocity, m/s.
        velocity: f64,
        plate_radius: f64,
        bound: f64,
    },
    MotorVoltage {
        connected: bool,
        /// Supply voltage, V. Ignored while disconnected.
        voltage: f64,
        bound: f64,
    },
}

fn check_finite(s: &HarvesterState) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState(*s))
    }
}

fn check_bound(a: f64, bound: f64) -> Result<()> {
    if a.is_finite() && a.abs() <= bound {
        Ok(())
    } else {
        Err(Error::ConstraintViolation { value: a, bound })
    }
}
