//! Fixed-step classical Runge–Kutta integration.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::HarvesterState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Inner RK4 step, s.
    pub step_h: f64,
    /// Record every `decimation`-th inner step.
    pub decimation: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            step_h: 1e-4,
            decimation: 10,
        }
    }
}

impl IntegratorConfig {
    pub const MAX_STEP: f64 = 1e-3;

    pub fn with_step(step_h: f64) -> Self {
        Self {
            step_h,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_h > 0.0 && self.step_h <= Self::MAX_STEP) {
            return Err(Error::InvalidParameter {
                name: "step_h",
                reason: format!("{} is outside (0, {}]", self.step_h, Self::MAX_STEP),
            });
        }
        if self.decimation == 0 {
            return Err(Error::InvalidParameter {
                name: "decimation",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// One classical RK4 step for a plain vector system.
pub fn rk4<const N: usize>(
    mut f: impl FnMut(f64, &[f64; N]) -> [f64; N],
    t: f64,
    y: &[f64; N],
    h: f64,
) -> [f64; N] {
    let axpy = |y: &[f64; N], k: &[f64; N], a: f64| -> [f64; N] {
        let mut out = *y;
        for (o, k) in out.iter_mut().zip(k) {
            *o += a * k;
        }
        out
    };
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &axpy(y, &k1, 0.5 * h));
    let k3 = f(t + 0.5 * h, &axpy(y, &k2, 0.5 * h));
    let k4 = f(t + h, &axpy(y, &k3, h));
    let mut out = *y;
    for j in 0..N {
        out[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    out
}

/// Advances a harvester state by one RK4 step of size `h` from time `t`.
///
/// The phase is wrapped into `[0, 2π)` afterwards; any non-finite stage or
/// result is reported as a divergence at `t + h`.
pub fn step<F>(rhs: &F, s: &HarvesterState, t: f64, h: f64) -> Result<HarvesterState>
where
    F: Fn(&HarvesterState, f64) -> Result<HarvesterState>,
{
    let diverged = |state: HarvesterState| Error::Divergence { t: t + h, state };
    let eval = |s: &HarvesterState, t: f64| -> Result<[f64; 5]> {
        match rhs(s, t) {
            Ok(d) => Ok(d.to_array()),
            Err(Error::NonFiniteState(bad)) => Err(diverged(bad)),
            Err(e) => Err(e),
        }
    };
    let y = s.to_array();
    let shift = |k: &[f64; 5], a: f64| {
        let mut out = y;
        for (o, k) in out.iter_mut().zip(k) {
            *o += a * k;
        }
        HarvesterState::from_array(out)
    };
    let k1 = eval(s, t)?;
    let k2 = eval(&shift(&k1, 0.5 * h), t + 0.5 * h)?;
    let k3 = eval(&shift(&k2, 0.5 * h), t + 0.5 * h)?;
    let k4 = eval(&shift(&k3, h), t + h)?;
    let mut out = y;
    for j in 0..5 {
        out[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    let next = HarvesterState::from_array(out);
    if !next.is_finite() {
        return Err(diverged(next));
    }
    Ok(next.with_wrapped_phase())
}

/// Splits `[t0, tf]` into equal steps no longer than `h`.
pub fn step_plan(t0: f64, tf: f64, h: f64) -> (usize, f64) {
    let span = tf - t0;
    if span <= 0.0 {
        return (0, h);
    }
    let n = (span / h - 1e-9).ceil().max(1.0) as usize;
    (n, span / n as f64)
}

/// Integrates from `t0` to `tf` without recording anything.
pub fn advance<F>(rhs: &F, s0: HarvesterState, t0: f64, tf: f64, h: f64) -> Result<HarvesterState>
where
    F: Fn(&HarvesterState, f64) -> Result<HarvesterState>,
{
    let (n, h_eff) = step_plan(t0, tf, h);
    let mut s = s0;
    for k in 0..n {
        s = step(rhs, &s, t0 + k as f64 * h_eff, h_eff)?;
    }
    Ok(s)
}

/// Sampled trajectory: `times[k]` pairs with `states[k]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<HarvesterState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, HarvesterState)> {
        Some((*self.times.last()?, *self.states.last()?))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(TRAJECTORY_HEADER)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            out.serialize(TrajectoryRow::new(*t, s, 0.0, 0.0))?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "phi", "theta", "theta_dot", "i", "x", "action", "reward"];

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub phi: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub i: f64,
    pub x: f64,
    pub action: f64,
    pub reward: f64,
}

impl TrajectoryRow {
    pub fn new(t: f64, s: &HarvesterState, action: f64, reward: f64) -> Self {
        Self {
            t,
            phi: s.phi,
            theta: s.theta,
            theta_dot: s.theta_dot,
            i: s.i,
            x: s.x,
            action,
            reward,
        }
    }
}

/// Integrates `rhs` over `[t0, tf]`, recording every `cfg.decimation`-th
/// step (plus both endpoints) and calling `observer` on each record.
pub fn integrate<F, O>(
    rhs: &F,
    s0: HarvesterState,
    t0: f64,
    tf: f64,
    cfg: &IntegratorConfig,
    mut observer: O,
) -> Result<Trajectory>
where
    F: Fn(&HarvesterState, f64) -> Result<HarvesterState>,
    O: FnMut(f64, &HarvesterState),
{
    cfg.validate()?;
    if !(tf >= t0) {
        return Err(Error::Config(format!("final time {tf} precedes start {t0}")));
    }
    let (n, h) = step_plan(t0, tf, cfg.step_h);
    let mut traj = Trajectory::default();
    let mut record = |t: f64, s: &HarvesterState, traj: &mut Trajectory| {
        observer(t, s);
        traj.times.push(t);
        traj.states.push(*s);
    };
    let mut s = s0;
    record(t0, &s, &mut traj);
    for k in 0..n {
        let t = t0 + k as f64 * h;
        s = step(rhs, &s, t, h)?;
        if (k + 1) % cfg.decimation == 0 || k + 1 == n {
            let t_next = if k + 1 == n { tf } else { t + h };
            record(t_next, &s, &mut traj);
        }
    }
    Ok(traj)
}
