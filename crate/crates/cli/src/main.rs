use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use harvester::attractor::{sample_basin_dataset, BasinDataset, OracleConfig, SamplingRanges};
use harvester::classifier::{train_classifier, BoaClassifier, ClassifierTrainConfig};
use harvester::controllers::{
    run_switch, write_episode_csv, Controller, Direction, ObservationEncoder, PolicyCheckpoint, RewardWeights,
    SpringControllerConfig, SwitchContext, SwitchingEnv, VoltageControllerConfig,
};
use harvester::ddpg::{train, write_training_log, DdpgAgent, Environment};
use harvester::experiment::{prepare_scenarios, run_comparison, switch_config, ScenarioFile};
use harvester::integrator::{integrate, IntegratorConfig};
use harvester::{Error, HarvesterParams, HarvesterState};

#[derive(Parser)]
#[command(name = "harvester", version, about = "Bistable vibration energy harvester: simulation, basins and attractor switching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the free harvester from an initial condition.
    Simulate {
        #[arg(long)]
        params: Option<PathBuf>,
        /// "theta,theta_dot,i"
        #[arg(long, allow_hyphen_values = true)]
        ic: String,
        #[arg(long)]
        tf: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label random states with the integration oracle.
    Basin {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the basin classifier to a labelled dataset.
    TrainBoa {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a switching policy with DDPG.
    TrainPolicy {
        #[arg(long, value_enum)]
        controller: ControllerKind,
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        bound: f64,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        boa: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Run one switching episode with a trained policy.
    Switch {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch-evaluate scenarios and write the comparison tables.
    Compare {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerKind {
    Spring,
    Voltage,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_params(path: Option<&Path>) -> Result<HarvesterParams, Failure> {
    let p = match path {
        Some(path) => HarvesterParams::load(path)?,
        None => HarvesterParams::default(),
    };
    p.validate()?;
    Ok(p)
}

fn parse_ic(s: &str) -> Result<HarvesterState, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("--ic `{s}`: {e}")))?;
    match v.as_slice() {
        [theta, theta_dot, i] if v.iter().all(|x| x.is_finite()) => Ok(HarvesterState::new(0.0, *theta, *theta_dot, *i)),
        _ => Err(Failure::Usage(format!("--ic `{s}` must be three finite numbers theta,theta_dot,i"))),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Simulate { params, ic, tf, out } => {
            let p = load_params(params.as_deref())?;
            let s0 = parse_ic(&ic)?;
            if !(tf >= 0.0 && tf.is_finite()) {
                return Err(Failure::Usage(format!("--tf {tf} must be a non-negative time")));
            }
            let rhs = |s: &HarvesterState, t: f64| p.rhs_uncontrolled(s, t);
            let traj = integrate(&rhs, s0, 0.0, tf, &IntegratorConfig::default(), |_, _| {})?;
            traj.write_csv(create(&out)?)?;
            println!("wrote {} rows to {}", traj.len(), out.display());
        }
        Command::Basin { params, n, seed, out } => {
            if n == 0 {
                return Err(Failure::Usage("--n must be at least 1".into()));
            }
            let p = load_params(params.as_deref())?;
            let ranges = SamplingRanges::default();
            let oracle = OracleConfig::default();
            let data = sample_basin_dataset(&p, n, &ranges, seed, &oracle)?;
            data.write_csv(create(&out)?)?;
            let meta = data.metadata(seed, ranges, oracle, &p);
            std::fs::write(with_suffix(&out, "_meta.json"), serde_json::to_string_pretty(&meta).map_err(Error::from)?)?;
            println!("wrote {n} samples to {} (HP fraction {:.4})", out.display(), data.hp_fraction());
        }
        Command::TrainBoa { data, epochs, seed, out } => {
            let set = BasinDataset::read_csv(File::open(&data)?)?;
            let cfg = ClassifierTrainConfig {
                epochs,
                seed,
                ..Default::default()
            };
            let (clf, metrics) = train_classifier(&set.samples, &SamplingRanges::default(), &cfg)?;
            clf.save(&out)?;
            std::fs::write(with_suffix(&out, "_metrics.json"), serde_json::to_string_pretty(&metrics).map_err(Error::from)?)?;
            println!(
                "validation accuracy {:.4} (epoch {}), weights in {}",
                metrics.best_validation_accuracy,
                metrics.best_epoch,
                out.display()
            );
        }
        Command::TrainPolicy {
            controller,
            direction,
            bound,
            episodes,
            seed,
            boa,
            out,
            params,
        } => {
            if !(bound > 0.0 && bound.is_finite()) {
                return Err(Failure::Usage(format!("--bound {bound} must be positive")));
            }
            let p = load_params(params.as_deref())?;
            let classifier = BoaClassifier::load(&boa)?;
            let controller = match controller {
                ControllerKind::Spring => Controller::Spring(SpringControllerConfig::matched(&p, bound)),
                ControllerKind::Voltage => Controller::Voltage(VoltageControllerConfig { f_volt: bound }),
            };
            let cfg = controller.ddpg_config();
            let mut env = SwitchingEnv::new(p.clone(), controller, direction, classifier.clone(), &cfg)?;
            let mut agent = DdpgAgent::new(env.observation_dim(), cfg, seed)?;
            let logs = train(&mut agent, &mut env, episodes, seed, |log, _| {
                if (log.episode + 1) % 50 == 0 {
                    eprintln!("episode {} return {:.3} success {}", log.episode + 1, log.episode_return, log.success);
                }
            })?;
            write_training_log(&logs, create(&with_suffix(&out, "_log.csv"))?)?;
            let ckpt = PolicyCheckpoint {
                controller,
                direction,
                encoder: ObservationEncoder::for_controller(&controller),
                ddpg: cfg,
                params: p,
                seed,
                episodes,
                actor: agent.actor.clone(),
                classifier,
            };
            ckpt.save(&out)?;
            let wins = logs.iter().filter(|l| l.success).count();
            println!("{wins}/{episodes} training episodes reached the target; policy in {}", out.display());
        }
        Command::Switch { policy, seed, out } => {
            let ckpt = PolicyCheckpoint::load(&policy)?;
            let ctx = SwitchContext {
                params: ckpt.params.clone(),
                controller: ckpt.controller,
                classifier: &ckpt.classifier,
                cfg: switch_config(&ckpt.ddpg, &OracleConfig::default()),
                weights: RewardWeights::from(&ckpt.ddpg),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = ckpt.direction;
            let r = run_switch(&ctx, &mut ckpt.policy(), d.start(), d.target(), &mut rng)?;
            write_episode_csv(&r.trajectory, create(&out)?)?;
            println!(
                "{} {}: {} energy {:.4e} J control time {:.3} s",
                ckpt.controller.name(),
                d,
                r.outcome.as_str(),
                r.energy_j,
                r.control_time_s
            );
        }
        Command::Compare {
            scenarios,
            trials,
            seed,
            out,
        } => {
            if trials == 0 {
                return Err(Failure::Usage("--trials must be at least 1".into()));
            }
            let file = ScenarioFile::load(&scenarios)?;
            let p = load_params(file.params.as_deref())?;
            let prepared = prepare_scenarios(&file, &p)?;
            let table = run_comparison(&p, &prepared, trials, seed, &OracleConfig::default())?;
            table.export(&out)?;
            for r in &table.rows {
                println!(
                    "{:<18} {}  success {:>5.1}%  energy {:.4e} J  periods {:.2}",
                    r.controller,
                    r.direction,
                    100.0 * r.success_rate,
                    r.mean_energy_j,
                    r.mean_periods_to_boa
                );
            }
        }
    }
    Ok(())
}

