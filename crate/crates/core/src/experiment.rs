//! Scenario comparison: batch switching trials, break-even figures and the
//! summary tables.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attractor::{energy_per_period, AttractorClass, OracleConfig};
use crate::classifier::BoaClassifier;
use crate::controllers::{
    run_switch, BangBangPolicy, Controller, Direction, EpisodeResult, PolicyCheckpoint, RewardWeights,
    SpringControllerConfig, SwitchConfig, SwitchContext, SwitchOutcome,
};
use crate::ddpg::DdpgConfig;
use crate::dynamics::HarvesterParams;
use crate::error::{Error, Result};

/// Forcing periods of harvesting needed to pay back `e_switch`.
pub fn break_even_periods(e_switch: f64, e_period: f64) -> Result<f64> {
    if !(e_period > 0.0) {
        return Err(Error::InvalidParameter {
            name: "e_period",
            reason: format!("{e_period} J per period is not positive"),
        });
    }
    Ok(e_switch / e_period)
}

/// Control duration in forcing periods.
pub fn periods_to_boa(control_time_s: f64, omega: f64) -> f64 {
    control_time_s * omega / TAU
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            out[k] = rank;
        }
        start = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rl,
    BangBang,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Row label, e.g. `spring-RL` or `voltage-RL-0.1`.
    pub label: String,
    pub method: Method,
    pub direction: Direction,
    /// Required for RL scenarios.
    #[serde(default)]
    pub policy: Option<PathBuf>,
    /// Push speed for bang-bang scenarios, m/s.
    #[serde(default)]
    pub bound: Option<f64>,
}

/// Contents of a `--scenarios` file. Relative paths are resolved against
/// the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Classifier used by bang-bang scenarios.
    #[serde(default)]
    pub boa: Option<PathBuf>,
    /// Harvester parameters; defaults when absent.
    #[serde(default)]
    pub params: Option<PathBuf>,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        f.boa.as_mut().map(resolve);
        f.params.as_mut().map(resolve);
        for s in &mut f.scenarios {
            s.policy.as_mut().map(resolve);
        }
        Ok(f)
    }
}

/// A scenario with its checkpoint or classifier loaded.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    pub label: String,
    pub direction: Direction,
    pub controller: Controller,
    pub classifier: BoaClassifier,
    pub runner: Runner,
}

#[derive(Debug, Clone)]
pub enum Runner {
    Actor(Box<PolicyCheckpoint>),
    BangBang(SpringControllerConfig),
}

pub fn prepare_scenarios(file: &ScenarioFile, params: &HarvesterParams) -> Result<Vec<PreparedScenario>> {
    let mut shared: Option<BoaClassifier> = None;
    let mut out = Vec::with_capacity(file.scenarios.len());
    for s in &file.scenarios {
        match s.method {
            Method::Rl => {
                let path = s
                    .policy
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("scenario `{}` has no policy checkpoint", s.label)))?;
                let ckpt = PolicyCheckpoint::load(path).map_err(|e| {
                    Error::Config(format!("scenario `{}`: cannot load policy {}: {e}", s.label, path.display()))
                })?;
                if ckpt.direction != s.direction {
                    return Err(Error::Config(format!(
                        "scenario `{}` is {} but its policy was trained for {}",
                        s.label, s.direction, ckpt.direction
                    )));
                }
                out.push(PreparedScenario {
                    label: s.label.clone(),
                    direction: s.direction,
                    controller: ckpt.controller,
                    classifier: ckpt.classifier.clone(),
                    runner: Runner::Actor(Box::new(ckpt)),
                });
            }
            Method::BangBang => {
                if shared.is_none() {
                    let path = file.boa.as_ref().ok_or_else(|| {
                        Error::Config(format!("scenario `{}` needs a classifier but the file names none", s.label))
                    })?;
                    shared = Some(BoaClassifier::load(path)?);
                }
                let cfg = SpringControllerConfig::matched(params, s.bound.unwrap_or(0.003));
                let controller = Controller::Spring(cfg);
                controller.validate()?;
                out.push(PreparedScenario {
                    label: s.label.clone(),
                    direction: s.direction,
                    controller,
                    classifier: shared.clone().expect("loaded above"),
                    runner: Runner::BangBang(cfg),
                });
            }
        }
    }
    Ok(out)
}

/// One row of the batch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub direction: Direction,
    pub controller: String,
    pub bound: f64,
    pub success: bool,
    #[serde(rename = "energy_J")]
    pub energy_j: f64,
    pub control_time_s: f64,
}

pub fn write_trial_summaries<W: Write>(rows: &[TrialSummary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-trial seed; trials with the same index share start states across
/// scenarios of the same direction.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(trial as u64)
}

/// Runs one prepared scenario from a seeded settled start.
pub fn run_scenario_trial(
    params: &HarvesterParams,
    sc: &PreparedScenario,
    oracle: &OracleConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (start, target) = (sc.direction.start(), sc.direction.target());
    match &sc.runner {
        Runner::Actor(ckpt) => {
            let ctx = SwitchContext {
                params: params.clone(),
                controller: sc.controller,
                classifier: &sc.classifier,
                cfg: switch_config(&ckpt.ddpg, oracle),
                weights: RewardWeights::from(&ckpt.ddpg),
            };
            run_switch(&ctx, &mut ckpt.policy(), start, target, &mut rng)
        }
        Runner::BangBang(cfg) => {
            let defaults = sc.controller.ddpg_config();
            let ctx = SwitchContext {
                params: params.clone(),
                controller: sc.controller,
                classifier: &sc.classifier,
                cfg: SwitchConfig {
                    oracle: *oracle,
                    ..SwitchConfig::bang_bang()
                },
                weights: RewardWeights::from(&defaults),
            };
            run_switch(&ctx, &mut BangBangPolicy::new(*cfg, sc.direction), start, target, &mut rng)
        }
    }
}

/// Evaluation caps for a policy trained with `ddpg`.
pub fn switch_config(ddpg: &DdpgConfig, oracle: &OracleConfig) -> SwitchConfig {
    SwitchConfig {
        dt_control: ddpg.dt_control,
        max_control_time: ddpg.t2,
        confidence: ddpg.termination_confidence,
        oracle: *oracle,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: String,
    pub direction: Direction,
    /// Mean over successful trials.
    #[serde(rename = "mean_energy_J")]
    pub mean_energy_j: f64,
    #[serde(rename = "break_even_periods_HP")]
    pub break_even_periods_hp: f64,
    #[serde(rename = "break_even_periods_LP")]
    pub break_even_periods_lp: f64,
    pub mean_periods_to_boa: f64,
    pub mean_control_time_s: f64,
    pub success_rate: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    #[serde(rename = "energy_per_period_HP_J")]
    pub energy_per_period_hp: f64,
    #[serde(rename = "energy_per_period_LP_J")]
    pub energy_per_period_lp: f64,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    pub trials: Vec<TrialSummary>,
}

pub fn run_comparison(
    params: &HarvesterParams,
    scenarios: &[PreparedScenario],
    trials: usize,
    seed: u64,
    oracle: &OracleConfig,
) -> Result<Comparison> {
    if trials == 0 {
        return Err(Error::InvalidParameter {
            name: "trials",
            reason: "at least one trial is needed".into(),
        });
    }
    let e_hp = energy_per_period(params, AttractorClass::Hp, oracle)?;
    let e_lp = energy_per_period(params, AttractorClass::Lp, oracle)?;
    let jobs: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|s| (0..trials).map(move |k| (s, k)))
        .collect();
    let results: Vec<TrialSummary> = jobs
        .par_iter()
        .map(|&(si, k)| {
            let sc = &scenarios[si];
            let ts = trial_seed(seed, k);
            let r = run_scenario_trial(params, sc, oracle, ts)
                .map_err(|e| Error::Config(format!("scenario `{}` trial {k}: {e}", sc.label)))?;
            Ok(TrialSummary {
                seed: ts,
                direction: sc.direction,
                controller: sc.label.clone(),
                bound: sc.controller.bound(),
                success: r.success,
                energy_j: r.energy_j,
                control_time_s: r.control_time_s,
            })
        })
        .collect::<Result<_>>()?;

    let mut grouped: BTreeMap<(String, Direction), Vec<&TrialSummary>> = BTreeMap::new();
    for t in &results {
        grouped.entry((t.controller.clone(), t.direction)).or_default().push(t);
    }
    let mut rows = Vec::with_capacity(grouped.len());
    for ((controller, direction), ts) in grouped {
        let ok: Vec<&&TrialSummary> = ts.iter().filter(|t| t.success).collect();
        let mean = |f: fn(&TrialSummary) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|t| f(t)).sum::<f64>() / ok.len() as f64
            }
        };
        let mean_energy = mean(|t| t.energy_j);
        let mean_time = mean(|t| t.control_time_s);
        rows.push(ComparisonRow {
            controller,
            direction,
            mean_energy_j: mean_energy,
            break_even_periods_hp: break_even_periods(mean_energy, e_hp)?,
            break_even_periods_lp: break_even_periods(mean_energy, e_lp)?,
            mean_periods_to_boa: periods_to_boa(mean_time, params.omega),
            mean_control_time_s: mean_time,
            success_rate: ok.len() as f64 / ts.len() as f64,
            trials: ts.len(),
        });
    }
    let mut trials_sorted = results;
    trials_sorted.sort_by(|a, b| {
        (&a.controller, a.direction, a.seed).cmp(&(&b.controller, b.direction, b.seed))
    });
    Ok(Comparison {
        energy_per_period_hp: e_hp,
        energy_per_period_lp: e_lp,
        seed,
        rows,
        trials: trials_sorted,
    })
}

impl Comparison {
    pub fn row(&self, controller: &str, direction: Direction) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.controller == controller && r.direction == direction)
    }

    /// Rank correlation between mean energy and mean duration over rows
    /// with at least one success.
    pub fn energy_duration_correlation(&self) -> Option<f64> {
        let rows: Vec<&ComparisonRow> = self.rows.iter().filter(|r| r.mean_energy_j.is_finite()).collect();
        let e: Vec<f64> = rows.iter().map(|r| r.mean_energy_j).collect();
        let d: Vec<f64> = rows.iter().map(|r| r.mean_control_time_s).collect();
        spearman(&e, &d)
    }

    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes the table to `path`, the per-trial summary next to it as
    /// `<stem>_trials.csv`, and everything as `<stem>.json`.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_rows_csv(fs::File::create(path)?)?;
        write_trial_summaries(&self.trials, fs::File::create(sibling(path, "_trials.csv"))?)?;
        fs::write(sibling(path, ".json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

impl SwitchOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            SwitchOutcome::Success => "success",
            SwitchOutcome::Trivial => "trivial",
            SwitchOutcome::ClassifierFalsePositive => "classifier_false_positive",
            SwitchOutcome::NeverReached => "never_reached",
            SwitchOutcome::Diverged => "diverged",
        }
    }
}
