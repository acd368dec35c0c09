//! Deep deterministic policy gradient with a replay ring, target networks
//! and Ornstein–Uhlenbeck exploration.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{soft_update, Activation, AdamState, AuxInput, Loss, Mlp};

pub const HIDDEN_WIDTH: usize = 128;
/// Initialisation half-width of both output layers.
pub const OUTPUT_INIT: f64 = 3e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub theta_ou: f64,
    /// Initial standard deviation as a fraction of the action bound.
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Fraction of the episodes over which σ is annealed linearly.
    pub anneal_fraction: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            theta_ou: 0.15,
            sigma_start: 0.2,
            sigma_end: 0.05,
            anneal_fraction: 0.5,
        }
    }
}

impl NoiseConfig {
    /// σ (fraction of the bound) for `episode` out of `total`.
    pub fn sigma_at(&self, episode: usize, total: usize) -> f64 {
        let span = (self.anneal_fraction * total as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.sigma_start + (self.sigma_end - self.sigma_start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpgConfig {
    pub gamma_disc: f64,
    pub tau_soft: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub buffer_capacity: usize,
    pub minibatch_n: usize,
    /// Phase 1 duration, s.
    pub t1: f64,
    /// Phase 2 cap, s.
    pub t2: f64,
    pub dt_control: f64,
    pub action_bound: f64,
    pub noise: NoiseConfig,
    pub r_end: f64,
    /// Reward units per joule of actuation.
    pub cost_scale: f64,
    /// Classifier probability of the target basin that ends the control stage.
    #[serde(default = "default_confidence")]
    pub termination_confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma_disc: 0.9,
            tau_soft: 0.1,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            buffer_capacity: 1_000_000,
            minibatch_n: 64,
            t1: 2.0,
            t2: 4.0,
            dt_control: 0.01,
            action_bound: 0.003,
            noise: NoiseConfig::default(),
            r_end: 1.0,
            cost_scale: 500.0,
            termination_confidence: default_confidence(),
        }
    }
}

impl DdpgConfig {
    pub fn with_bound(action_bound: f64) -> Self {
        Self {
            action_bound,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.gamma_disc) {
            return bad("gamma_disc", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau_soft) {
            return bad("tau_soft", "must lie in [0, 1]");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return bad("lr", "learning rates must be positive");
        }
        if self.buffer_capacity == 0 || self.minibatch_n == 0 {
            return bad("buffer_capacity", "buffer and minibatch sizes must be positive");
        }
        if !(self.dt_control > 0.0 && self.t1 >= 0.0 && self.t2 > 0.0) {
            return bad("dt_control", "times must be positive");
        }
        if !(0.5..1.0).contains(&self.termination_confidence) {
            return bad("termination_confidence", "must lie in [0.5, 1)");
        }
        if !(self.action_bound > 0.0 && self.action_bound.is_finite()) {
            return bad("action_bound", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: f64,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring; the oldest transition is overwritten when full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    bound: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, bound: f64) -> Self {
        Self {
            items: Vec::new(),
            capacity,
            next: 0,
            bound,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.a.abs() > self.bound {
            return Err(Error::ConstraintViolation {
                value: t.a,
                bound: self.bound,
            });
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Uniform sampling with replacement.
    pub fn sample<'a, R: Rng>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }

    /// Contents from oldest to newest.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }
}

/// Discrete Ornstein–Uhlenbeck process with zero mean.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    state: f64,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64) -> Self {
        Self { theta, sigma, state: 0.0 }
    }

    pub fn reset(&mut self) {
        self.state = 0.0;
    }

    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let w: f64 = rng.sample(StandardNormal);
        self.state += -self.theta * self.state + self.sigma * w;
        self.state
    }
}

pub fn build_actor<R: Rng>(obs_dim: usize, rng: &mut R) -> Result<Mlp> {
    let mut net = Mlp::random(
        &[obs_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1],
        &[Activation::Relu, Activation::Relu, Activation::Tanh],
        rng,
    )?;
    shrink_output(&mut net, rng);
    Ok(net)
}

/// The action enters the second hidden layer alongside the first layer's output.
pub fn build_critic<R: Rng>(obs_dim: usize, rng: &mut R) -> Result<Mlp> {
    let mut net = Mlp::random_with_aux(
        &[obs_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1],
        &[Activation::Relu, Activation::Relu, Activation::Linear],
        AuxInput { layer: 1, dim: 1 },
        rng,
    )?;
    shrink_output(&mut net, rng);
    Ok(net)
}

fn shrink_output<R: Rng>(net: &mut Mlp, rng: &mut R) {
    let last = net.layers().len() - 1;
    let layer = net.layer_mut(last);
    layer.weights.mapv_inplace(|_| rng.gen_range(-OUTPUT_INIT..=OUTPUT_INIT));
    layer.bias.mapv_inplace(|_| rng.gen_range(-OUTPUT_INIT..=OUTPUT_INIT));
}

/// Stream ids keep initialisation, exploration, replay sampling and
/// environment resets independent under one seed.
const STREAM_INIT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_REPLAY: u64 = 2;
pub const STREAM_ENV: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub cfg: DdpgConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub buffer: ReplayBuffer,
    pub noise: OuNoise,
    noise_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}

/// Minibatch laid out as matrices. Actions are divided by the bound.
struct Batch {
    s: Array2<f64>,
    a: Array2<f64>,
    r: Vec<f64>,
    s_next: Array2<f64>,
    done: Vec<bool>,
}

impl DdpgAgent {
    pub fn new(obs_dim: usize, cfg: DdpgConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = stream_rng(seed, STREAM_INIT);
        let actor = build_actor(obs_dim, &mut init)?;
        let critic = build_critic(obs_dim, &mut init)?;
        Ok(Self {
            actor_opt: AdamState::new(&actor, cfg.lr_actor),
            critic_opt: AdamState::new(&critic, cfg.lr_critic),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.action_bound),
            noise: OuNoise::new(cfg.noise.theta_ou, cfg.noise.sigma_start * cfg.action_bound),
            noise_rng: stream_rng(seed, STREAM_NOISE),
            replay_rng: stream_rng(seed, STREAM_REPLAY),
            cfg,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// `F·π(s)`, plus clamped exploration noise when `explore` is set.
    pub fn select_action(&mut self, obs: &[f64], explore: bool) -> Result<f64> {
        let f = self.cfg.action_bound;
        let a = f * self.actor.forward(obs)?[0];
        if !explore {
            return Ok(a);
        }
        let nu = self.noise.sample(&mut self.noise_rng);
        Ok((a + nu).clamp(-f, f))
    }

    fn batch(&self, items: &[&Transition]) -> Batch {
        let n = items.len();
        let d = self.obs_dim();
        let f = self.cfg.action_bound;
        let mut s = Array2::zeros((n, d));
        let mut s_next = Array2::zeros((n, d));
        let mut a = Array2::zeros((n, 1));
        for (k, t) in items.iter().enumerate() {
            s.row_mut(k).iter_mut().zip(&t.s).for_each(|(o, v)| *o = *v);
            s_next.row_mut(k).iter_mut().zip(&t.s_next).for_each(|(o, v)| *o = *v);
            a[[k, 0]] = t.a / f;
        }
        Batch {
            s,
            a,
            r: items.iter().map(|t| t.r).collect(),
            s_next,
            done: items.iter().map(|t| t.done).collect(),
        }
    }

    fn check_items(&self, items: &[&Transition]) -> Result<()> {
        if items.is_empty() {
            return Err(Error::Config("empty minibatch".into()));
        }
        for t in items {
            if t.s.len() != self.obs_dim() || t.s_next.len() != self.obs_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.obs_dim(),
                    got: t.s.len().min(t.s_next.len()),
                });
            }
        }
        Ok(())
    }

    /// `y = r + γ·Q′(s′, π′(s′))`, or `y = r` for terminal transitions.
    pub fn critic_targets(&self, items: &[&Transition]) -> Result<Vec<f64>> {
        self.check_items(items)?;
        let b = self.batch(items);
        let a_next = self.target_actor.forward_batch(b.s_next.view(), None)?;
        let q_next = self.target_critic.forward_batch(b.s_next.view(), Some(a_next.view()))?;
        Ok((0..items.len())
            .map(|k| {
                if b.done[k] {
                    b.r[k]
                } else {
                    b.r[k] + self.cfg.gamma_disc * q_next[[k, 0]]
                }
            })
            .collect())
    }

    /// One Adam step on the mean squared TD error; returns the pre-step loss.
    pub fn update_critic(&mut self, items: &[&Transition], targets: &[f64]) -> Result<f64> {
        self.check_items(items)?;
        if targets.len() != items.len() {
            return Err(Error::DimensionMismatch {
                expected: items.len(),
                got: targets.len(),
            });
        }
        let b = self.batch(items);
        let y = Array2::from_shape_vec((targets.len(), 1), targets.to_vec()).unwrap();
        let (loss, back) = self
            .critic
            .backprop(b.s.view(), Some(b.a.view()), Loss::MeanSquared(y.view()))?;
        self.critic_opt.step(&mut self.critic, &back.grads)?;
        Ok(loss)
    }

    /// Gradient of `−mean Q(s, π(s))` with respect to the actor parameters.
    pub fn actor_gradient(&self, items: &[&Transition]) -> Result<crate::nn::Gradients> {
        self.check_items(items)?;
        let b = self.batch(items);
        let n = items.len() as f64;
        let actor_cache = self.actor.forward_cached(b.s.view(), None)?;
        let pi = actor_cache.output().clone();
        let critic_cache = self.critic.forward_cached(b.s.view(), Some(pi.view()))?;
        let upstream = Array2::from_elem((items.len(), 1), -1.0 / n);
        let d_q = self.critic.backward(&critic_cache, upstream.view())?;
        let d_pi = d_q.d_aux.expect("critic takes the action as auxiliary input");
        Ok(self.actor.backward(&actor_cache, d_pi.view())?.grads)
    }

    /// One Adam ascent step on the critic's value of the actor's actions.
    /// Returns the gradient norm.
    pub fn update_actor(&mut self, items: &[&Transition]) -> Result<f64> {
        let grads = self.actor_gradient(items)?;
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(grads.l2_norm())
    }

    /// Actor gradient for an externally supplied `∂Q/∂a(s, a)`, with `a` in
    /// controller units, averaged over `observations`.
    pub fn actor_gradient_with(
        &self,
        observations: &[Vec<f64>],
        dq_da: impl Fn(&[f64], f64) -> f64,
    ) -> Result<crate::nn::Gradients> {
        let d = self.obs_dim();
        let n = observations.len();
        if n == 0 {
            return Err(Error::Config("empty minibatch".into()));
        }
        let mut s = Array2::zeros((n, d));
        for (k, o) in observations.iter().enumerate() {
            if o.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: o.len() });
            }
            s.row_mut(k).iter_mut().zip(o).for_each(|(dst, v)| *dst = *v);
        }
        let f = self.cfg.action_bound;
        let cache = self.actor.forward_cached(s.view(), None)?;
        let pi = cache.output();
        let mut upstream = Array2::zeros((n, 1));
        for k in 0..n {
            upstream[[k, 0]] = -dq_da(&observations[k], f * pi[[k, 0]]) * f / n as f64;
        }
        Ok(self.actor.backward(&cache, upstream.view())?.grads)
    }

    /// `update_actor` against an analytic critic.
    pub fn update_actor_with(&mut self, observations: &[Vec<f64>], dq_da: impl Fn(&[f64], f64) -> f64) -> Result<f64> {
        let grads = self.actor_gradient_with(observations, dq_da)?;
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(grads.l2_norm())
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        soft_update(&mut self.target_actor, &self.actor, self.cfg.tau_soft)?;
        soft_update(&mut self.target_critic, &self.critic, self.cfg.tau_soft)
    }

    /// Critic, actor and target updates on one sampled minibatch, once the
    /// buffer holds a full minibatch. Returns the critic loss when it ran.
    pub fn learn(&mut self) -> Result<Option<f64>> {
        if self.buffer.len() < self.cfg.minibatch_n {
            return Ok(None);
        }
        let items: Vec<Transition> = self
            .buffer
            .sample(self.cfg.minibatch_n, &mut self.replay_rng)
            .into_iter()
            .cloned()
            .collect();
        let refs: Vec<&Transition> = items.iter().collect();
        let targets = self.critic_targets(&refs)?;
        let loss = self.update_critic(&refs, &targets)?;
        self.update_actor(&refs)?;
        self.soft_update_targets()?;
        Ok(Some(loss))
    }
}

/// Result of one control step of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Target basin reached.
    pub done: bool,
    /// Time cap hit without reaching the target.
    pub truncated: bool,
    /// Raw actuation energy of this step, J.
    pub cost_j: f64,
}

/// Episodic control problem driven by the trainer.
pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_bound(&self) -> f64;
    /// Starts an episode and returns the first observation.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    fn step(&mut self, action: f64) -> Result<StepOutcome>;
    /// Seconds per call to `step`.
    fn control_dt(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub success: bool,
    pub energy_j: f64,
    pub control_time_s: f64,
    pub steps: usize,
}

/// Runs `episodes` rounds of rollout and per-step learning. A diverging
/// episode is logged as a failure and training continues.
pub fn train<E: Environment>(
    agent: &mut DdpgAgent,
    env: &mut E,
    episodes: usize,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeLog, &DdpgAgent),
) -> Result<Vec<EpisodeLog>> {
    if env.observation_dim() != agent.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: agent.obs_dim(),
            got: env.observation_dim(),
        });
    }
    if (env.action_bound() - agent.cfg.action_bound).abs() > 0.0 {
        return Err(Error::Config(format!(
            "environment bound {} differs from agent bound {}",
            env.action_bound(),
            agent.cfg.action_bound
        )));
    }
    let mut env_rng = stream_rng(seed, STREAM_ENV);
    let mut logs = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        agent.noise.sigma = agent.cfg.noise.sigma_at(episode, episodes) * agent.cfg.action_bound;
        agent.noise.reset();
        let mut log = EpisodeLog {
            episode,
            episode_return: 0.0,
            success: false,
            energy_j: 0.0,
            control_time_s: 0.0,
            steps: 0,
        };
        let mut obs = match env.reset(&mut env_rng) {
            Ok(o) => o,
            Err(Error::Divergence { .. }) => {
                on_episode(&log, agent);
                logs.push(log);
                continue;
            }
            Err(e) => return Err(e),
        };
        loop {
            let a = agent.select_action(&obs, true)?;
            let out = match env.step(a) {
                Ok(o) => o,
                Err(Error::Divergence { .. }) => break,
                Err(e) => return Err(e),
            };
            log.steps += 1;
            log.episode_return += out.reward;
            log.energy_j += out.cost_j;
            agent.buffer.push(Transition {
                s: obs,
                a,
                r: out.reward,
                s_next: out.observation.clone(),
                done: out.done,
            })?;
            agent.learn()?;
            obs = out.observation;
            if out.done {
                log.success = true;
                break;
            }
            if out.truncated {
                break;
            }
        }
        log.control_time_s = log.steps as f64 * env.control_dt();
        on_episode(&log, agent);
        logs.push(log);
    }
    Ok(logs)
}

pub fn write_training_log<W: std::io::Write>(logs: &[EpisodeLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for l in logs {
        out.serialize(l)?;
    }
    out.flush()?;
    Ok(())
}

/// Convenience for tests and diagnostics: Q at a single state and action.
pub fn q_value(critic: &Mlp, obs: &[f64], normalized_action: f64) -> Result<f64> {
    Ok(critic.forward_with_aux(obs, &[normalized_action])?[0])
}
