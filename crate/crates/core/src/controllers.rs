//! Attractor-switching environments for the two actuation options, their
//! rewards, the actuator reset, and the quasi-bang-bang baseline.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attractor::{
    classify_steady_state, resting_attractor_oracle, settle_with, AttractorClass, AttractorLabel, Branch,
    OracleConfig, SamplingRanges,
};
use crate::classifier::BoaClassifier;
use crate::ddpg::{DdpgConfig, Environment, NoiseConfig, StepOutcome};
use crate::dynamics::HarvesterParams;
use crate::error::{Error, Result};
use crate::integrator::{advance, step};
use crate::nn::Mlp;
use crate::state::HarvesterState;

/// Inner RK4 step used under control, s.
pub const CONTROL_STEP_H: f64 = 1e-4;
/// Trajectory rows are written every this many inner steps.
pub const RECORD_EVERY: usize = 10;
/// Redraw cap when looking for a start state on a given attractor.
const MAX_START_DRAWS: usize = 1000;
/// Cap on the spring anchor return, s.
pub const MAX_RESET_TIME: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "lp2hp")]
    LpToHp,
    #[serde(rename = "hp2lp")]
    HpToLp,
}

impl Direction {
    pub fn start(self) -> AttractorClass {
        match self {
            Direction::LpToHp => AttractorClass::Lp,
            Direction::HpToLp => AttractorClass::Hp,
        }
    }

    pub fn target(self) -> AttractorClass {
        self.start().other()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::LpToHp => "lp2hp",
            Direction::HpToLp => "hp2lp",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lp2hp" => Ok(Direction::LpToHp),
            "hp2lp" => Ok(Direction::HpToLp),
            other => Err(Error::Config(format!("unknown direction `{other}`; expected lp2hp or hp2lp"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpringControllerConfig {
    /// Largest actuator speed, m/s.
    pub f_spring: f64,
    /// Plate radius the springs act on, m.
    pub r_spr: f64,
    /// Stiffness of each linear spring, N/m.
    pub k_spr: f64,
    /// Pretension, m.
    pub x0_pretension: f64,
    /// Reset tolerance on the actuator position, m.
    pub x_tol: f64,
}

impl Default for SpringControllerConfig {
    fn default() -> Self {
        Self::matched(&HarvesterParams::default(), 0.003)
    }
}

impl SpringControllerConfig {
    /// Springs at 1 cm whose stiffness reproduces the torsional stiffness.
    pub fn matched(p: &HarvesterParams, f_spring: f64) -> Self {
        let r_spr = 0.01;
        Self {
            f_spring,
            r_spr,
            k_spr: p.stiffness / (2.0 * r_spr * r_spr),
            x0_pretension: 0.05,
            x_tol: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f_spring", self.f_spring),
            ("r_spr", self.r_spr),
            ("k_spr", self.k_spr),
            ("x0_pretension", self.x0_pretension),
            ("x_tol", self.x_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("{v} is not positive"),
                });
            }
        }
        Ok(())
    }

    /// Length by which the pulled spring is stretched, m.
    pub fn stretch(&self, s: &HarvesterState) -> f64 {
        s.x - self.r_spr * s.theta + self.x0_pretension
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltageControllerConfig {
    /// Largest supply voltage magnitude, V.
    pub f_volt: f64,
}

impl Default for VoltageControllerConfig {
    fn default() -> Self {
        Self { f_volt: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Controller {
    Spring(SpringControllerConfig),
    Voltage(VoltageControllerConfig),
}

impl Controller {
    pub fn bound(&self) -> f64 {
        match self {
            Controller::Spring(c) => c.f_spring,
            Controller::Voltage(c) => c.f_volt,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Controller::Spring(_) => "spring",
            Controller::Voltage(_) => "voltage",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Controller::Spring(c) => c.validate(),
            Controller::Voltage(c) if c.f_volt > 0.0 && c.f_volt.is_finite() => Ok(()),
            Controller::Voltage(c) => Err(Error::InvalidParameter {
                name: "f_volt",
                reason: format!("{} is not positive", c.f_volt),
            }),
        }
    }

    /// Training defaults for this actuator. The voltage controller uses the
    /// stock configuration. The spring controller decides every 0.1 s, weighs
    /// energy at 150 per joule and starts from wider exploration noise.
    pub fn ddpg_config(&self) -> DdpgConfig {
        let base = DdpgConfig::with_bound(self.bound());
        match self {
            Controller::Voltage(_) => base,
            Controller::Spring(_) => DdpgConfig {
                dt_control: 0.1,
                cost_scale: 150.0,
                noise: NoiseConfig {
                    sigma_start: 1.0,
                    ..base.noise
                },
                ..base
            },
        }
    }

    /// Instantaneous actuation power, clipped at zero, W.
    pub fn power(&self, s: &HarvesterState, a: f64) -> Result<f64> {
        match self {
            Controller::Spring(c) => spring_power(s, a, c),
            Controller::Voltage(_) => Ok(voltage_power(s, a)),
        }
    }

    fn rhs(&self, p: &HarvesterParams, s: &HarvesterState, t: f64, a: f64) -> Result<HarvesterState> {
        match self {
            Controller::Spring(c) => p.rhs_spring(s, t, a, c.r_spr, c.f_spring),
            Controller::Voltage(c) => p.rhs_voltage(s, t, true, a, c.f_volt),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub r_end: f64,
    /// Reward units per joule.
    pub cost_scale: f64,
}

impl From<&DdpgConfig> for RewardWeights {
    fn from(c: &DdpgConfig) -> Self {
        Self {
            r_end: c.r_end,
            cost_scale: c.cost_scale,
        }
    }
}

fn check_action(a: f64, bound: f64) -> Result<()> {
    if a.is_finite() && a.abs() <= bound {
        Ok(())
    } else {
        Err(Error::ConstraintViolation { value: a, bound })
    }
}

/// Power the actuator spends pulling the spring end, W. Retraction is free.
pub fn spring_power(s: &HarvesterState, a: f64, cfg: &SpringControllerConfig) -> Result<f64> {
    let stretch = cfg.stretch(s);
    if stretch <= 0.0 {
        return Err(Error::SlackSpring(stretch));
    }
    Ok(cfg.k_spr * stretch * a.max(0.0))
}

/// Power drawn from the supply, W. Charging the supply is free.
pub fn voltage_power(s: &HarvesterState, a: f64) -> f64 {
    (a * s.i).max(0.0)
}

/// `(reward, cost_J)` for holding `a` for `dt` from `s`.
pub fn spring_reward(
    s: &HarvesterState,
    a: f64,
    reached: bool,
    cfg: &SpringControllerConfig,
    dt: f64,
    w: &RewardWeights,
) -> Result<(f64, f64)> {
    check_action(a, cfg.f_spring)?;
    let cost = spring_power(s, a, cfg)? * dt;
    Ok((reward_from_cost(cost, reached, w), cost))
}

pub fn voltage_reward(
    s: &HarvesterState,
    a: f64,
    reached: bool,
    cfg: &VoltageControllerConfig,
    dt: f64,
    w: &RewardWeights,
) -> Result<(f64, f64)> {
    check_action(a, cfg.f_volt)?;
    let cost = voltage_power(s, a) * dt;
    Ok((reward_from_cost(cost, reached, w), cost))
}

pub fn reward_from_cost(cost_j: f64, reached: bool, w: &RewardWeights) -> f64 {
    -w.cost_scale * cost_j + if reached { w.r_end } else { 0.0 }
}

/// Full-speed retraction towards `x = 0`; the last step is shortened so
/// that it lands on zero instead of overshooting.
pub fn actuator_reset_policy(x: f64, cfg: &SpringControllerConfig, dt: f64) -> f64 {
    if x.abs() <= cfg.x_tol {
        return 0.0;
    }
    -x.signum() * cfg.f_spring.min(x.abs() / dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BangBangStage {
    Push,
    Return,
    Off,
}

/// Sign of the initial push. From an LP cycle the push opposes the cycle's
/// offset angle; from HP it is negative.
pub fn push_sign(direction: Direction, start_branch: Option<Branch>) -> f64 {
    match (direction, start_branch) {
        (Direction::LpToHp, Some(Branch::Positive)) => -1.0,
        (Direction::LpToHp, _) => 1.0,
        (Direction::HpToLp, _) => -1.0,
    }
}

pub fn quasi_bang_bang_step(
    s: &HarvesterState,
    stage: BangBangStage,
    sign: f64,
    cfg: &SpringControllerConfig,
    dt: f64,
) -> f64 {
    match stage {
        BangBangStage::Push => sign.signum() * cfg.f_spring,
        BangBangStage::Return => actuator_reset_policy(s.x, cfg, dt),
        BangBangStage::Off => 0.0,
    }
}

/// Features seen by the actor and critic:
/// `[sin φ, cos φ, θ/θs, θ̇/θ̇s, i/is]`, plus `x/xs` for the spring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationEncoder {
    pub theta_scale: f64,
    pub theta_dot_scale: f64,
    pub i_scale: f64,
    /// `None` leaves the actuator position out.
    pub x_scale: Option<f64>,
}

impl ObservationEncoder {
    pub fn for_controller(c: &Controller) -> Self {
        Self {
            theta_scale: PI,
            theta_dot_scale: 50.0,
            i_scale: 0.1,
            x_scale: match c {
                Controller::Spring(s) => Some(s.r_spr),
                Controller::Voltage(_) => None,
            },
        }
    }

    pub fn dim(&self) -> usize {
        5 + usize::from(self.x_scale.is_some())
    }

    pub fn encode(&self, s: &HarvesterState) -> Vec<f64> {
        let mut v = vec![
            s.phi.sin(),
            s.phi.cos(),
            s.theta / self.theta_scale,
            s.theta_dot / self.theta_dot_scale,
            s.i / self.i_scale,
        ];
        if let Some(xs) = self.x_scale {
            v.push(s.x / xs);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Control,
    Reset,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Control => "control",
            Stage::Reset => "reset",
        })
    }
}

/// One trajectory sample. `action` is held from this row to the next;
/// `cost_j` is the energy spent since the previous row and `reward` is the
/// reward of the control step that ends at this row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub t: f64,
    pub phi: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub i: f64,
    pub x: f64,
    pub action: f64,
    pub reward: f64,
    pub stage: Stage,
    #[serde(rename = "cost_J")]
    pub cost_j: f64,
}

impl EpisodeRow {
    pub fn state(&self) -> HarvesterState {
        HarvesterState {
            phi: self.phi,
            theta: self.theta,
            theta_dot: self.theta_dot,
            i: self.i,
            x: self.x,
        }
    }
}

pub const EPISODE_HEADER: [&str; 10] = [
    "t", "phi", "theta", "theta_dot", "i", "x", "action", "reward", "stage", "cost_J",
];

pub fn write_episode_csv<W: Write>(rows: &[EpisodeRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(EPISODE_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// A harvester under one of the controllers, advanced in control steps.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: HarvesterParams,
    pub controller: Controller,
    pub dt_control: f64,
    pub state: HarvesterState,
    pub t: f64,
}

impl Plant {
    pub fn new(params: HarvesterParams, controller: Controller, dt_control: f64) -> Result<Self> {
        params.validate()?;
        controller.validate()?;
        Ok(Self {
            params,
            controller,
            dt_control,
            state: HarvesterState::default(),
            t: 0.0,
        })
    }

    fn substeps(&self) -> usize {
        ((self.dt_control / CONTROL_STEP_H).round() as usize).max(1)
    }

    /// Holds `a` for one control step and returns the actuation energy,
    /// integrated with the trapezoid rule over the inner steps. Rows are
    /// appended to `record` every `RECORD_EVERY` inner steps.
    pub fn advance(&mut self, a: f64, stage: Stage, mut record: Option<&mut Vec<EpisodeRow>>) -> Result<f64> {
        check_action(a, self.controller.bound())?;
        let n = self.substeps();
        let h = self.dt_control / n as f64;
        let p = &self.params;
        let ctrl = self.controller;
        let rhs = |s: &HarvesterState, t: f64| ctrl.rhs(p, s, t, a);
        let t0 = self.t;
        let mut s = self.state;
        let mut power = ctrl.power(&s, a)?;
        let mut energy = 0.0;
        let mut since_row = 0.0;
        if let Some(rows) = record.as_deref_mut() {
            if rows.is_empty() {
                rows.push(row(t0, &s, a, stage, 0.0));
            } else if let Some(last) = rows.last_mut() {
                last.action = a;
            }
        }
        for k in 0..n {
            s = step(&rhs, &s, t0 + k as f64 * h, h)?;
            let next = ctrl.power(&s, a)?;
            let piece = 0.5 * (power + next) * h;
            energy += piece;
            since_row += piece;
            power = next;
            if (k + 1) % RECORD_EVERY == 0 || k + 1 == n {
                if let Some(rows) = record.as_deref_mut() {
                    let t = if k + 1 == n { t0 + self.dt_control } else { t0 + (k + 1) as f64 * h };
                    rows.push(row(t, &s, a, stage, since_row));
                    since_row = 0.0;
                }
            }
        }
        self.state = s;
        self.t = t0 + self.dt_control;
        Ok(energy)
    }
}

fn row(t: f64, s: &HarvesterState, action: f64, stage: Stage, cost_j: f64) -> EpisodeRow {
    EpisodeRow {
        t,
        phi: s.phi,
        theta: s.theta,
        theta_dot: s.theta_dot,
        i: s.i,
        x: s.x,
        action,
        reward: 0.0,
        stage,
        cost_j,
    }
}

/// True when the classifier gives the target basin at least `confidence`.
pub fn in_target_basin(classifier: &BoaClassifier, s: &HarvesterState, target: AttractorClass, confidence: f64) -> bool {
    let p_hp = classifier.probability(s);
    match target {
        AttractorClass::Hp => p_hp >= confidence,
        AttractorClass::Lp => 1.0 - p_hp >= confidence,
    }
}

/// Table-2 style episode start: random state, free run for `T1` plus a
/// random fraction of a forcing period, retried until the classifier puts
/// the state in the requested basin.
pub fn free_run_start(
    p: &HarvesterParams,
    start: AttractorClass,
    t1: f64,
    ranges: &SamplingRanges,
    classifier: &BoaClassifier,
    rng: &mut ChaCha8Rng,
) -> Result<(HarvesterState, f64)> {
    let rhs = |s: &HarvesterState, t: f64| p.rhs_uncontrolled(s, t);
    for _ in 0..MAX_START_DRAWS {
        let drawn = ranges.sample(rng);
        let s0 = HarvesterState { phi: 0.0, ..drawn };
        let t_end = t1 + rng.gen_range(0.0..p.forcing_period());
        let s = advance(&rhs, s0, 0.0, t_end, CONTROL_STEP_H)?;
        if classifier.predict_resting_attractor(&s).1 == start {
            return Ok((s, t_end));
        }
    }
    Err(Error::Config(format!("no start state on the {start} attractor after {MAX_START_DRAWS} draws")))
}

/// Evaluation start: a random state settled by the oracle onto the requested
/// attractor, then run freely for a random fraction of a forcing period.
pub fn settled_start(
    p: &HarvesterParams,
    start: AttractorClass,
    ranges: &SamplingRanges,
    oracle: &OracleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(HarvesterState, f64, AttractorLabel)> {
    let rhs = |s: &HarvesterState, t: f64| p.rhs_uncontrolled(s, t);
    for _ in 0..MAX_START_DRAWS {
        let s0 = ranges.sample(rng);
        let jitter = rng.gen_range(0.0..p.forcing_period());
        let settled = settle_with(p, s0, oracle)?;
        let label = match classify_steady_state(&settled.summary, oracle.threshold_ptp) {
            Ok(l) => l,
            Err(Error::AmbiguousAttractor { .. }) => continue,
            Err(e) => return Err(e),
        };
        if label.class() == start {
            let s = advance(&rhs, settled.state, settled.t, settled.t + jitter, CONTROL_STEP_H)?;
            return Ok((s, settled.t + jitter, label));
        }
    }
    Err(Error::Config(format!("no start state on the {start} attractor after {MAX_START_DRAWS} draws")))
}

/// Gym-style training environment: Phase 1 on reset, Phase 2 in steps.
#[derive(Debug, Clone)]
pub struct SwitchingEnv {
    pub plant: Plant,
    pub direction: Direction,
    pub classifier: BoaClassifier,
    pub encoder: ObservationEncoder,
    pub ranges: SamplingRanges,
    pub weights: RewardWeights,
    pub t1: f64,
    pub max_steps: usize,
    pub confidence: f64,
    steps: usize,
}

impl SwitchingEnv {
    pub fn new(
        params: HarvesterParams,
        controller: Controller,
        direction: Direction,
        classifier: BoaClassifier,
        ddpg: &DdpgConfig,
    ) -> Result<Self> {
        let plant = Plant::new(params, controller, ddpg.dt_control)?;
        Ok(Self {
            encoder: ObservationEncoder::for_controller(&controller),
            plant,
            direction,
            classifier,
            ranges: SamplingRanges::default(),
            weights: RewardWeights::from(ddpg),
            t1: ddpg.t1,
            max_steps: (ddpg.t2 / ddpg.dt_control).round() as usize,
            confidence: ddpg.termination_confidence,
            steps: 0,
        })
    }

    pub fn state(&self) -> HarvesterState {
        self.plant.state
    }

    /// Places the plant at a given state and time, bypassing Phase 1.
    pub fn reset_to(&mut self, s: HarvesterState, t: f64) -> Vec<f64> {
        self.plant.state = s;
        self.plant.t = t;
        self.steps = 0;
        self.encoder.encode(&s)
    }
}

impl Environment for SwitchingEnv {
    fn observation_dim(&self) -> usize {
        self.encoder.dim()
    }

    fn action_bound(&self) -> f64 {
        self.plant.controller.bound()
    }

    fn control_dt(&self) -> f64 {
        self.plant.dt_control
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let (s, t) = free_run_start(
            &self.plant.params,
            self.direction.start(),
            self.t1,
            &self.ranges,
            &self.classifier,
            rng,
        )?;
        Ok(self.reset_to(s, t))
    }

    fn step(&mut self, action: f64) -> Result<StepOutcome> {
        let mut cost = self.plant.advance(action, Stage::Control, None)?;
        self.steps += 1;
        let reached = in_target_basin(&self.classifier, &self.plant.state, self.direction.target(), self.confidence);
        if reached {
            if let Controller::Spring(cfg) = self.plant.controller {
                // the anchor return is paid for on the terminal transition
                let mut ret = self.plant.clone();
                let max = (MAX_RESET_TIME / ret.dt_control).round() as usize;
                cost += return_actuator(&mut ret, &cfg, max, None)?.0;
            }
        }
        Ok(StepOutcome {
            observation: self.encoder.encode(&self.plant.state),
            reward: reward_from_cost(cost, reached, &self.weights),
            done: reached,
            truncated: !reached && self.steps >= self.max_steps,
            cost_j: cost,
        })
    }
}

/// Anything that maps the current state to an action.
pub trait SwitchPolicy {
    fn action(&mut self, s: &HarvesterState) -> Result<f64>;
}

/// Deterministic actor `F·π(s)`.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    pub actor: Mlp,
    pub bound: f64,
    pub encoder: ObservationEncoder,
}

impl SwitchPolicy for ActorPolicy {
    fn action(&mut self, s: &HarvesterState) -> Result<f64> {
        let a = self.bound * self.actor.forward(&self.encoder.encode(s))?[0];
        Ok(a.clamp(-self.bound, self.bound))
    }
}

/// Constant full-speed push with a sign fixed at the first call.
#[derive(Debug, Clone)]
pub struct BangBangPolicy {
    pub cfg: SpringControllerConfig,
    pub direction: Direction,
    sign: Option<f64>,
}

impl BangBangPolicy {
    pub fn new(cfg: SpringControllerConfig, direction: Direction) -> Self {
        Self {
            cfg,
            direction,
            sign: None,
        }
    }
}

impl SwitchPolicy for BangBangPolicy {
    fn action(&mut self, s: &HarvesterState) -> Result<f64> {
        let direction = self.direction;
        let sign = *self.sign.get_or_insert_with(|| {
            let branch = if s.theta >= 0.0 { Branch::Positive } else { Branch::Negative };
            push_sign(direction, Some(branch))
        });
        Ok(quasi_bang_bang_step(s, BangBangStage::Push, sign, &self.cfg, 0.0))
    }
}

impl<F: FnMut(&HarvesterState) -> Result<f64>> SwitchPolicy for F {
    fn action(&mut self, s: &HarvesterState) -> Result<f64> {
        self(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchOutcome {
    Success,
    /// Start already equals target.
    Trivial,
    /// The classifier reported the target basin but the oracle disagreed.
    ClassifierFalsePositive,
    /// The time cap expired before the classifier reported the target.
    NeverReached,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub dt_control: f64,
    /// Cap on the controlled stage, s.
    pub max_control_time: f64,
    /// Cap on the actuator reset, s.
    pub max_reset_time: f64,
    /// See `DdpgConfig::termination_confidence`.
    pub confidence: f64,
    pub oracle: OracleConfig,
    pub ranges: SamplingRanges,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            dt_control: 0.01,
            max_control_time: 4.0,
            max_reset_time: MAX_RESET_TIME,
            confidence: 0.95,
            oracle: OracleConfig::default(),
            ranges: SamplingRanges::default(),
        }
    }
}

impl SwitchConfig {
    /// Caps for the quasi-bang-bang baseline.
    pub fn bang_bang() -> Self {
        Self {
            max_control_time: 8.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub outcome: SwitchOutcome,
    pub energy_j: f64,
    pub control_time_s: f64,
    pub reset_time_s: f64,
    pub start_label: Option<AttractorLabel>,
    pub final_label: Option<AttractorLabel>,
    pub trajectory: Vec<EpisodeRow>,
}

impl EpisodeResult {
    fn trivial() -> Self {
        Self {
            success: true,
            outcome: SwitchOutcome::Trivial,
            energy_j: 0.0,
            control_time_s: 0.0,
            reset_time_s: 0.0,
            start_label: None,
            final_label: None,
            trajectory: Vec::new(),
        }
    }
}

/// Everything fixed across the trials of one scenario.
#[derive(Debug, Clone)]
pub struct SwitchContext<'a> {
    pub params: HarvesterParams,
    pub controller: Controller,
    pub classifier: &'a BoaClassifier,
    pub cfg: SwitchConfig,
    pub weights: RewardWeights,
}

/// One switching attempt from a settled start on `start` towards `target`:
/// control until the classifier reports the target basin, reset the
/// actuator, switch off, and verify with the oracle.
pub fn run_switch<P: SwitchPolicy>(
    ctx: &SwitchContext,
    policy: &mut P,
    start: AttractorClass,
    target: AttractorClass,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult> {
    if start == target {
        return Ok(EpisodeResult::trivial());
    }
    let (s0, t0, start_label) = settled_start(&ctx.params, start, &ctx.cfg.ranges, &ctx.cfg.oracle, rng)?;
    run_switch_from(ctx, policy, s0, t0, Some(start_label), target)
}

/// As `run_switch`, from a given state and time.
pub fn run_switch_from<P: SwitchPolicy>(
    ctx: &SwitchContext,
    policy: &mut P,
    s0: HarvesterState,
    t0: f64,
    start_label: Option<AttractorLabel>,
    target: AttractorClass,
) -> Result<EpisodeResult> {
    let mut plant = Plant::new(ctx.params.clone(), ctx.controller, ctx.cfg.dt_control)?;
    plant.state = s0;
    plant.t = t0;
    let dt = ctx.cfg.dt_control;
    let mut rows = Vec::new();
    let mut result = EpisodeResult {
        success: false,
        outcome: SwitchOutcome::NeverReached,
        energy_j: 0.0,
        control_time_s: 0.0,
        reset_time_s: 0.0,
        start_label,
        final_label: None,
        trajectory: Vec::new(),
    };
    let max_steps = (ctx.cfg.max_control_time / dt).round() as usize;
    let mut reached = false;
    let mut steps = 0;
    while steps < max_steps {
        let a = policy.action(&plant.state)?;
        let cost = match plant.advance(a, Stage::Control, Some(&mut rows)) {
            Ok(cost) => cost,
            Err(Error::Divergence { .. }) => {
                result.outcome = SwitchOutcome::Diverged;
                result.control_time_s = steps as f64 * dt;
                result.trajectory = rows;
                return Ok(result);
            }
            Err(e) => return Err(e),
        };
        result.energy_j += cost;
        steps += 1;
        reached = in_target_basin(ctx.classifier, &plant.state, target, ctx.cfg.confidence);
        if let Some(last) = rows.last_mut() {
            last.reward = reward_from_cost(cost, reached, &ctx.weights);
        }
        if reached {
            break;
        }
    }
    result.control_time_s = steps as f64 * dt;
    if !reached {
        result.trajectory = rows;
        return Ok(result);
    }

    if let Controller::Spring(cfg) = ctx.controller {
        let max_reset = (ctx.cfg.max_reset_time / dt).round() as usize;
        let (energy, reset_steps) = return_actuator(&mut plant, &cfg, max_reset, Some(&mut rows))?;
        result.energy_j += energy;
        result.reset_time_s = reset_steps as f64 * dt;
        result.control_time_s += result.reset_time_s;
    }
    if let Some(last) = rows.last_mut() {
        // the last recorded row has no following interval
        last.action = 0.0;
    }

    result.final_label = match resting_attractor_oracle(&ctx.params, &plant.state, &ctx.cfg.oracle) {
        Ok(l) => Some(l),
        Err(Error::AmbiguousAttractor { .. }) => None,
        Err(Error::Divergence { .. }) => {
            result.outcome = SwitchOutcome::Diverged;
            result.trajectory = rows;
            return Ok(result);
        }
        Err(e) => return Err(e),
    };
    result.success = result.final_label.map(|l| l.class()) == Some(target);
    result.outcome = if result.success {
        SwitchOutcome::Success
    } else {
        SwitchOutcome::ClassifierFalsePositive
    };
    result.trajectory = rows;
    Ok(result)
}

/// Drives the spring anchor back to rest at full speed. Returns the energy
/// spent and the number of control steps taken.
pub fn return_actuator(
    plant: &mut Plant,
    cfg: &SpringControllerConfig,
    max_steps: usize,
    mut record: Option<&mut Vec<EpisodeRow>>,
) -> Result<(f64, usize)> {
    let dt = plant.dt_control;
    let (mut energy, mut steps) = (0.0, 0);
    while plant.state.x.abs() > cfg.x_tol && steps < max_steps {
        let a = actuator_reset_policy(plant.state.x, cfg, dt);
        energy += plant.advance(a, Stage::Reset, record.as_deref_mut())?;
        steps += 1;
    }
    Ok((energy, steps))
}

/// Actuation energy re-derived from stored rows with the trapezoid rule.
pub fn trajectory_energy(rows: &[EpisodeRow], controller: &Controller) -> Result<f64> {
    let mut total = 0.0;
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let u = a.action;
        let pa = controller.power(&a.state(), u)?;
        let pb = controller.power(&b.state(), u)?;
        total += 0.5 * (pa + pb) * (b.t - a.t);
    }
    Ok(total)
}

/// Saved policy: actor weights plus everything needed to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub controller: Controller,
    pub direction: Direction,
    pub encoder: ObservationEncoder,
    pub ddpg: DdpgConfig,
    pub params: HarvesterParams,
    pub seed: u64,
    pub episodes: usize,
    pub actor: Mlp,
    /// Basin classifier the policy was trained against; it also ends
    /// the control stage when the policy is run.
    pub classifier: BoaClassifier,
}

impl PolicyCheckpoint {
    pub fn policy(&self) -> ActorPolicy {
        ActorPolicy {
            actor: self.actor.clone(),
            bound: self.controller.bound(),
            encoder: self.encoder,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if c.actor.input_dim() != c.encoder.dim() || c.actor.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: c.encoder.dim(),
                got: c.actor.input_dim(),
            });
        }
        c.controller.validate()?;
        c.classifier.validate()?;
        Ok(c)
    }
}
