//! Steady-state analysis of the free harvester.
//!
//! Settled responses are summarised over a short window and labelled as the
//! high-power (HP) cycle or one of the two mirror-image low-power (LP)
//! cycles. Long integration followed by this classification is the ground
//! truth for every basin-of-attraction question in the crate.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::HarvesterParams;
use crate::error::{Error, Result};
use crate::integrator::{advance, step, step_plan};
use crate::state::HarvesterState;

/// Initial conditions `[θ, θ̇, i]` that land on the HP cycle and on the
/// positive and negative LP cycles when started at zero phase.
pub const HP_IC: [f64; 3] = [-1.15, -38.0, 0.07];
pub const LP_POSITIVE_IC: [f64; 3] = [1.0, -1.4, 0.008];
pub const LP_NEGATIVE_IC: [f64; 3] = [-1.0, 1.4, -0.008];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttractorClass {
    Lp,
    Hp,
}

impl AttractorClass {
    pub fn as_u8(self) -> u8 {
        match self {
            Self::Lp => 0,
            Self::Hp => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Lp),
            1 => Ok(Self::Hp),
            other => Err(Error::Config(format!("unknown attractor label {other}"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Self::Lp => Self::Hp,
            Self::Hp => Self::Lp,
        }
    }
}

impl fmt::Display for AttractorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lp => "LP",
            Self::Hp => "HP",
        })
    }
}

/// Sign of the mean angle of an LP cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttractorLabel {
    Hp,
    Lp(Branch),
}

impl AttractorLabel {
    pub fn class(self) -> AttractorClass {
        match self {
            Self::Hp => AttractorClass::Hp,
            Self::Lp(_) => AttractorClass::Lp,
        }
    }

    pub fn branch(self) -> Option<Branch> {
        match self {
            Self::Hp => None,
            Self::Lp(b) => Some(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateSummary {
    /// Peak-to-peak angle over the window, rad.
    pub theta_ptp: f64,
    /// Time-averaged angle, rad.
    pub theta_mean: f64,
    /// Half the peak-to-peak current, A.
    pub i_amp: f64,
    /// Mean spacing of upward mean-crossings of θ, s. NaN when fewer than
    /// two crossings occur in the window.
    pub response_period: f64,
    /// Load energy per forcing period averaged over the window, J.
    pub energy_per_period: f64,
}

/// Settling and labelling settings for the integration oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Total uncontrolled integration, in forcing periods.
    pub settle_periods: f64,
    /// Trailing measurement window, in forcing periods.
    pub window_periods: f64,
    /// Peak-to-peak angle separating HP from LP, rad.
    pub threshold_ptp: f64,
    /// RK4 step used while settling, s.
    pub step_h: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            settle_periods: 40.0,
            window_periods: 5.0,
            threshold_ptp: DEFAULT_THRESHOLD_PTP,
            step_h: 2.5e-4,
        }
    }
}

/// Midpoint of the settled HP and LP peak-to-peak angles at the default
/// parameters, as returned by [`derive_threshold`].
pub const DEFAULT_THRESHOLD_PTP: f64 = 1.5587;

pub const MIN_SETTLE_PERIODS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settled {
    pub state: HarvesterState,
    pub t: f64,
    pub summary: SteadyStateSummary,
}

/// Integrates the free harvester for `settle_periods` forcing periods from
/// `(s0, t0)` and summarises the last `window_periods`.
pub fn settle(
    p: &HarvesterParams,
    s0: HarvesterState,
    t0: f64,
    settle_periods: f64,
    window_periods: f64,
    step_h: f64,
) -> Result<Settled> {
    if settle_periods < MIN_SETTLE_PERIODS {
        return Err(Error::Config(format!(
            "settling needs at least {MIN_SETTLE_PERIODS} forcing periods, got {settle_periods}"
        )));
    }
    if !(window_periods > 0.0 && window_periods < settle_periods) {
        return Err(Error::Config(format!("bad measurement window {window_periods}")));
    }
    let period = p.forcing_period();
    let rhs = |s: &HarvesterState, t: f64| p.rhs_uncontrolled(s, t);
    let t_window = t0 + (settle_periods - window_periods) * period;
    let t_end = t0 + settle_periods * period;
    let mut s = advance(&rhs, s0, t0, t_window, step_h)?;

    let (n, h) = step_plan(t_window, t_end, step_h);
    let mut theta = Vec::with_capacity(n + 1);
    let mut current = Vec::with_capacity(n + 1);
    theta.push(s.theta);
    current.push(s.i);
    for k in 0..n {
        s = step(&rhs, &s, t_window + k as f64 * h, h)?;
        theta.push(s.theta);
        current.push(s.i);
    }
    let summary = summarize(&theta, &current, h, window_periods, p.load_resistance);
    Ok(Settled {
        state: s,
        t: t_end,
        summary,
    })
}

fn summarize(theta: &[f64], current: &[f64], h: f64, periods: f64, load: f64) -> SteadyStateSummary {
    let span = h * (theta.len() - 1) as f64;
    let theta_mean = trapezoid(theta, h, |v| v) / span;
    let theta_ptp = refined_max(theta) - refined_min(theta);
    let i_amp = 0.5 * (refined_max(current) - refined_min(current));
    let energy_per_period = trapezoid(current, h, |i| i * i * load) / periods;

    let mut crossings = Vec::new();
    for k in 1..theta.len() {
        let (a, b) = (theta[k - 1] - theta_mean, theta[k] - theta_mean);
        if a < 0.0 && b >= 0.0 {
            crossings.push(h * ((k - 1) as f64 + a / (a - b)));
        }
    }
    let response_period = if crossings.len() >= 2 {
        (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64
    } else {
        f64::NAN
    };
    SteadyStateSummary {
        theta_ptp,
        theta_mean,
        i_amp,
        response_period,
        energy_per_period,
    }
}

fn trapezoid(v: &[f64], h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = v[1..n - 1].iter().map(|&x| f(x)).sum();
    h * (inner + 0.5 * (f(v[0]) + f(v[n - 1])))
}

/// Largest sample, refined by the vertex of the parabola through it and its
/// neighbours.
fn refined_max(v: &[f64]) -> f64 {
    let (k, &best) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty window");
    if k == 0 || k + 1 == v.len() {
        return best;
    }
    let (l, r) = (v[k - 1], v[k + 1]);
    let curv = l - 2.0 * best + r;
    if curv >= 0.0 {
        return best;
    }
    best - (l - r) * (l - r) / (8.0 * curv)
}

fn refined_min(v: &[f64]) -> f64 {
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    -refined_max(&neg)
}

/// HP iff the peak-to-peak angle reaches the threshold. Values within 10%
/// of the threshold are refused rather than guessed.
pub fn classify_steady_state(sum: &SteadyStateSummary, threshold_ptp: f64) -> Result<AttractorLabel> {
    if !sum.theta_ptp.is_finite() {
        return Err(Error::AmbiguousAttractor {
            ptp: sum.theta_ptp,
            threshold: threshold_ptp,
        });
    }
    if (sum.theta_ptp - threshold_ptp).abs() <= 0.1 * threshold_ptp {
        return Err(Error::AmbiguousAttractor {
            ptp: sum.theta_ptp,
            threshold: threshold_ptp,
        });
    }
    if sum.theta_ptp >= threshold_ptp {
        Ok(AttractorLabel::Hp)
    } else if sum.theta_mean >= 0.0 {
        Ok(AttractorLabel::Lp(Branch::Positive))
    } else {
        Ok(AttractorLabel::Lp(Branch::Negative))
    }
}

/// Start time whose excitation phase equals `phi`.
pub fn time_of_phase(p: &HarvesterParams, phi: f64) -> f64 {
    phi / p.omega
}

pub fn settle_with(p: &HarvesterParams, s: HarvesterState, cfg: &OracleConfig) -> Result<Settled> {
    settle(
        p,
        s,
        time_of_phase(p, s.phi),
        cfg.settle_periods,
        cfg.window_periods,
        cfg.step_h,
    )
}

/// Ground-truth resting attractor of the uncontrolled harvester from `s`.
///
/// The actuator position is ignored: the free dynamics do not depend on it.
pub fn resting_attractor_oracle(p: &HarvesterParams, s: &HarvesterState, cfg: &OracleConfig) -> Result<AttractorLabel> {
    let settled = settle_with(p, HarvesterState { x: 0.0, ..*s }, cfg)?;
    classify_steady_state(&settled.summary, cfg.threshold_ptp)
}

/// Canonical initial condition (at zero phase) for an attractor class.
pub fn canonical_ic(class: AttractorClass) -> [f64; 3] {
    match class {
        AttractorClass::Hp => HP_IC,
        AttractorClass::Lp => LP_POSITIVE_IC,
    }
}

/// Settles onto the requested attractor from its canonical initial condition.
pub fn settled_cycle(p: &HarvesterParams, class: AttractorClass, cfg: &OracleConfig) -> Result<Settled> {
    let settled = settle_with(p, HarvesterState::from_ic(canonical_ic(class), 0.0), cfg)?;
    let label = classify_steady_state(&settled.summary, cfg.threshold_ptp)?;
    if label.class() != class {
        return Err(Error::Config(format!(
            "canonical initial condition for {class} settled on {}",
            label.class()
        )));
    }
    Ok(settled)
}

/// Energy dissipated in the load over one forcing period of the settled
/// cycle, J.
pub fn energy_per_period(p: &HarvesterParams, class: AttractorClass, cfg: &OracleConfig) -> Result<f64> {
    Ok(settled_cycle(p, class, cfg)?.summary.energy_per_period)
}

/// Peak-to-peak midpoint between the settled HP and LP cycles.
pub fn derive_threshold(p: &HarvesterParams, cfg: &OracleConfig) -> Result<f64> {
    let ptp = |ic| -> Result<f64> {
        let s = settle_with(p, HarvesterState::from_ic(ic, 0.0), cfg)?;
        Ok(s.summary.theta_ptp)
    };
    Ok(0.5 * (ptp(HP_IC)? + ptp(LP_POSITIVE_IC)?))
}

/// Uniform sampling box for basin datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub phi: (f64, f64),
    pub theta: (f64, f64),
    pub theta_dot: (f64, f64),
    pub i: (f64, f64),
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            phi: (0.0, TAU),
            theta: (-PI, PI),
            theta_dot: (-50.0, 50.0),
            i: (-0.1, 0.1),
        }
    }
}

impl SamplingRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> HarvesterState {
        let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
        let phi = draw(self.phi);
        let theta = draw(self.theta);
        let theta_dot = draw(self.theta_dot);
        let i = draw(self.i);
        HarvesterState::new(phi, theta, theta_dot, i)
    }

    pub fn lower(&self) -> [f64; 4] {
        [self.phi.0, self.theta.0, self.theta_dot.0, self.i.0]
    }

    pub fn upper(&self) -> [f64; 4] {
        [self.phi.1, self.theta.1, self.theta_dot.1, self.i.1]
    }
}

/// Independent generator for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasinSample {
    pub phi: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub i: f64,
    pub label: u8,
}

impl BasinSample {
    pub fn state(&self) -> HarvesterState {
        HarvesterState::new(self.phi, self.theta, self.theta_dot, self.i)
    }

    pub fn class(&self) -> AttractorClass {
        if self.label == 1 {
            AttractorClass::Hp
        } else {
            AttractorClass::Lp
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub n: usize,
    pub seed: u64,
    pub ranges: SamplingRanges,
    pub oracle: OracleConfig,
    pub t_settle: f64,
    pub resampled: usize,
    pub hp_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinDataset {
    pub samples: Vec<BasinSample>,
    /// Draws discarded because the oracle found them ambiguous.
    pub resampled: usize,
}

impl BasinDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn hp_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.label == 1).count() as f64 / self.samples.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.samples {
            out.serialize(s)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let samples = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<BasinSample>, _>>()?;
        if let Some(bad) = samples.iter().find(|s| s.label > 1) {
            return Err(Error::Config(format!("label {} is not 0 or 1", bad.label)));
        }
        Ok(Self { samples, resampled: 0 })
    }

    pub fn metadata(&self, seed: u64, ranges: SamplingRanges, oracle: OracleConfig, p: &HarvesterParams) -> DatasetMetadata {
        DatasetMetadata {
            n: self.samples.len(),
            seed,
            ranges,
            oracle,
            t_settle: oracle.settle_periods * p.forcing_period(),
            resampled: self.resampled,
            hp_fraction: self.hp_fraction(),
        }
    }
}

/// Cap on ambiguous redraws for a single sample index.
const MAX_REDRAWS: usize = 64;

/// Draws `n` uniform states from `ranges` and labels each with the
/// integration oracle. Sample `k` depends only on `(seed, k)`, so the result
/// is identical however the work is scheduled.
pub fn sample_basin_dataset(
    p: &HarvesterParams,
    n: usize,
    ranges: &SamplingRanges,
    seed: u64,
    cfg: &OracleConfig,
) -> Result<BasinDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let rows = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let mut redraws = 0;
            loop {
                let s = ranges.sample(&mut rng);
                match resting_attractor_oracle(p, &s, cfg) {
                    Ok(label) => {
                        return Ok((
                            BasinSample {
                                phi: s.phi,
                                theta: s.theta,
                                theta_dot: s.theta_dot,
                                i: s.i,
                                label: label.class().as_u8(),
                            },
                            redraws,
                        ))
                    }
                    Err(Error::AmbiguousAttractor { .. }) if redraws < MAX_REDRAWS => redraws += 1,
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let resampled = rows.iter().map(|(_, r)| r).sum();
    Ok(BasinDataset {
        samples: rows.into_iter().map(|(s, _)| s).collect(),
        resampled,
    })
}
