//! Twin-delayed deterministic policy gradient.
//!
//! The actor emits pre-activation logits; exploration and target-smoothing
//! noise are added there, and the environment's terminal activations run
//! afterwards. Critics consume `[state | activated action]` and the replay
//! buffer stores activated actions.

use std::io::Write;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::Scenario;
use crate::env::{self, decode_activated, evaluate, initial_state, ActionLayout, EnvConfig};
use crate::error::{IsacError, Result};
use crate::metrics::linear_to_db;
use crate::nn::{Activation, Adam, AdamRecord, DenseNetwork, LayerActivation, NetworkRecord};
use crate::seeds::{self, Stream};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Exploration noise schedule and dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuConfig {
    pub sigma0: f64,
    pub sigma_min: f64,
    /// Decay rate `ϖ` per episode.
    pub decay: f64,
    /// Mean-reversion rate.
    pub theta: f64,
    pub dt: f64,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self {
            sigma0: 0.1,
            sigma_min: 0.005,
            decay: 0.006,
            theta: 0.15,
            dt: 1.0,
        }
    }
}

impl OuConfig {
    /// `σ(ζ) = σ0 e^{-ϖζ} + σ_min`.
    pub fn sigma(&self, episode: usize) -> f64 {
        self.sigma0 * (-self.decay * episode as f64).exp() + self.sigma_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Config {
    /// Discount `ϱ`.
    pub discount: f64,
    /// Soft-update coefficient `τ`.
    pub tau: f64,
    /// Variance of the target-smoothing Gaussian before clipping.
    pub smoothing_variance: f64,
    /// Clip range `c` of the smoothing noise.
    pub smoothing_clip: f64,
    /// Critic updates per actor update.
    pub policy_delay: u64,
    pub ou: OuConfig,
    pub warmup_episodes: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Uniform init range of the last layer of every network.
    pub final_init_scale: f64,
    /// Uniform init range of the actor's output bias, so the initial policy is an interior action.
    pub actor_bias_init: f64,
    /// Weight of the mean squared actor pre-activation subtracted from the actor objective.
    pub actor_logit_penalty: f64,
    /// Greedy evaluation every this many episodes.
    pub eval_interval: usize,
    /// The last this many episodes are all evaluated.
    pub tail_episodes: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            discount: 0.98,
            tau: 0.003,
            smoothing_variance: 0.15,
            smoothing_clip: 0.01,
            policy_delay: 2,
            ou: OuConfig::default(),
            warmup_episodes: 30,
            batch_size: 128,
            buffer_capacity: 100_000,
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            actor_lr: 1e-4,
            critic_lr: 3e-4,
            final_init_scale: 3e-3,
            actor_bias_init: 1.0,
            actor_logit_penalty: 0.0,
            eval_interval: 10,
            tail_episodes: 20,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(IsacError::Config(what.to_string()));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("soft-update coefficient must lie in (0, 1]");
        }
        if !(self.smoothing_clip >= 0.0) || !(self.smoothing_variance >= 0.0) {
            return bad("smoothing noise parameters must be nonnegative");
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("policy delay and batch size must be positive and the buffer must hold a batch");
        }
        if !(self.ou.sigma0 >= 0.0 && self.ou.sigma_min >= 0.0 && self.ou.decay >= 0.0 && self.ou.dt > 0.0) {
            return bad("OU parameters must be nonnegative with positive time step");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.actor_bias_init >= 0.0 && self.actor_logit_penalty >= 0.0) || !(self.final_init_scale > 0.0) {
            return bad("initialization ranges must be nonnegative");
        }
        if self.eval_interval == 0 {
            return bad("evaluation interval must be positive");
        }
        Ok(())
    }
}

/// Temporally correlated exploration noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuProcess {
    pub x: Vec<f64>,
    pub cfg: OuConfig,
    pub sigma: f64,
}

impl OuProcess {
    pub fn new(dim: usize, cfg: OuConfig) -> Self {
        Self {
            x: vec![0.0; dim],
            cfg,
            sigma: cfg.sigma(0),
        }
    }

    /// Zeroes the state and sets the scale for episode `episode`.
    pub fn reset(&mut self, episode: usize) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
        self.decay_to(episode);
    }

    pub fn decay_to(&mut self, episode: usize) {
        self.sigma = self.cfg.sigma(episode);
    }

    /// `x ← x - θ x dt + σ sqrt(dt) N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        let (theta, dt) = (self.cfg.theta, self.cfg.dt);
        let diffusion = self.sigma * dt.sqrt();
        for v in self.x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += -theta * *v * dt + diffusion * z;
        }
        &self.x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Activated action.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

/// Stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
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

    /// Appends, overwriting the oldest record once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Uniform indices over the filled region, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        self.gather(&self.sample_indices(n, rng))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let first = &self.items[idx[0]];
        let (sd, ad) = (first.state.len(), first.action.len());
        let stack = |dim: usize, f: &dyn Fn(&Transition) -> &[f64]| {
            Array2::from_shape_vec((idx.len(), dim), idx.iter().flat_map(|&i| f(&self.items[i]).iter().copied()).collect())
                .expect("transitions share dimensions")
        };
        Batch {
            states: stack(sd, &|t| &t.state),
            actions: stack(ad, &|t| &t.action),
            rewards: idx.iter().map(|&i| self.items[i].reward).collect(),
            next_states: stack(sd, &|t| &t.next_state),
            dones: idx.iter().map(|&i| f64::from(u8::from(self.items[i].done))).collect(),
        }
    }
}

/// Source of `Q(s, a)` and `∂Q/∂a` for the actor update.
pub trait ActionValue {
    /// Values (batch) and action gradients (batch × action_dim).
    fn value_and_action_grad(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)>;
}

fn join(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("batch sizes agree")
}

impl ActionValue for DenseNetwork {
    fn value_and_action_grad(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let input = join(states, actions);
        let cache = self.forward_cached(input.view())?;
        let q = cache.output().column(0).to_owned();
        let (_, dx) = self.backward(&cache, &Array2::ones((input.nrows(), 1)));
        Ok((q, dx.slice(s![.., states.ncols()..]).to_owned()))
    }
}

/// Online and target networks with their optimizers.
#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub actor: DenseNetwork,
    pub actor_target: DenseNetwork,
    pub critics: [DenseNetwork; 2],
    pub critic_targets: [DenseNetwork; 2],
    pub actor_opt: Adam,
    pub critic_opts: [Adam; 2],
    pub critic_updates: u64,
    pub layout: ActionLayout,
    pub state_dim: usize,
}

/// Losses reported by one [`Td3Agent::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub critic_losses: [f64; 2],
    /// Mean `Q1(s, π(s))` when the actor was stepped.
    pub actor_objective: Option<f64>,
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, layout: ActionLayout, cfg: &Td3Config, rng: &mut R) -> Result<Self> {
        let action_dim = layout.dim();
        let sizes = |input: usize, hidden: &[usize], output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let mut actor = DenseNetwork::mlp(
            &sizes(state_dim, &cfg.actor_hidden, action_dim),
            Activation::Relu,
            layout.output_activation(),
            Some(cfg.final_init_scale),
            rng,
        )?;
        if cfg.actor_bias_init > 0.0 {
            let b = cfg.actor_bias_init;
            let last = actor.layers_mut().last_mut().expect("actor has layers");
            last.bias.mapv_inplace(|_| rng.random_range(-b..b));
        }
        let critic_sizes = sizes(state_dim + action_dim, &cfg.critic_hidden, 1);
        let mut make_critic = || {
            DenseNetwork::mlp(
                &critic_sizes,
                Activation::Relu,
                LayerActivation::Uniform(Activation::Identity),
                Some(cfg.final_init_scale),
                rng,
            )
        };
        let critics = [make_critic()?, make_critic()?];
        Ok(Self {
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic_opts: [Adam::new(&critics[0], cfg.critic_lr), Adam::new(&critics[1], cfg.critic_lr)],
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            critic_updates: 0,
            layout,
            state_dim,
        })
    }

    /// Deterministic logits of the online actor.
    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.logits(state)
    }

    /// `π'(s') + ε` with `ε ~ clip(N(0, σ²), -c, c)` added before the terminal activations.
    pub fn smooth_target_action<R: Rng + ?Sized>(&self, next_states: ArrayView2<'_, f64>, cfg: &Td3Config, rng: &mut R) -> Result<Array2<f64>> {
        let mut logits = self.actor_target.logits_batch(next_states)?;
        let std = cfg.smoothing_variance.sqrt();
        let c = cfg.smoothing_clip;
        if std > 0.0 {
            logits.mapv_inplace(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + (std * z).clamp(-c, c)
            });
        }
        Ok(self.actor_target.output_activation().apply(&logits))
    }

    /// Bellman targets `r + ϱ (1 - d) min_j Q'_j(s', ã')`.
    pub fn targets<R: Rng + ?Sized>(&self, batch: &Batch, cfg: &Td3Config, rng: &mut R) -> Result<Array1<f64>> {
        let next_actions = self.smooth_target_action(batch.next_states.view(), cfg, rng)?;
        let input = join(batch.next_states.view(), next_actions.view());
        let q1 = self.critic_targets[0].forward_batch(input.view())?;
        let q2 = self.critic_targets[1].forward_batch(input.view())?;
        Ok(Array1::from_shape_fn(batch.rewards.len(), |i| {
            batch.rewards[i] + cfg.discount * (1.0 - batch.dones[i]) * q1[[i, 0]].min(q2[[i, 0]])
        }))
    }

    /// One mean-squared Bellman step on both critics.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, cfg: &Td3Config, rng: &mut R) -> Result<[f64; 2]> {
        let y = self.targets(batch, cfg, rng)?;
        let input = join(batch.states.view(), batch.actions.view());
        let b = y.len() as f64;
        let mut losses = [0.0; 2];
        for j in 0..2 {
            let cache = self.critics[j].forward_cached(input.view())?;
            let err = &cache.output().column(0) - &y;
            let loss = err.mapv(|e| e * e).sum() / b;
            if !loss.is_finite() {
                return Err(IsacError::Divergence(format!("critic {} loss is {loss}", j + 1)));
            }
            let upstream = err.mapv(|e| 2.0 * e / b).insert_axis(Axis(1));
            let (grads, _) = self.critics[j].backward(&cache, &upstream);
            self.critic_opts[j].apply(&mut self.critics[j], &grads)?;
            losses[j] = loss;
        }
        self.critic_updates += 1;
        Ok(losses)
    }

    /// Gradient ascent on `mean Q(s, π(s))`; returns the objective before the step.
    pub fn actor_update<Q: ActionValue + ?Sized>(
        &mut self,
        states: ArrayView2<'_, f64>,
        critic: &Q,
        logit_penalty: f64,
    ) -> Result<f64> {
        let cache = self.actor.forward_cached(states)?;
        let (q, dq_da) = critic.value_and_action_grad(states, cache.output().view())?;
        let b = q.len() as f64;
        let objective = q.sum() / b;
        if !objective.is_finite() {
            return Err(IsacError::Divergence(format!("actor objective is {objective}")));
        }
        let upstream = dq_da.mapv(|g| -g / b);
        let penalty = logit_penalty;
        let (grads, _) = if penalty > 0.0 {
            let width = cache.logits().ncols() as f64;
            let logit_grad = cache.logits().mapv(|z| 2.0 * penalty * z / (b * width));
            self.actor.backward_with_logit_grad(&cache, &upstream, Some(&logit_grad))
        } else {
            self.actor.backward(&cache, &upstream)
        };
        self.actor_opt.apply(&mut self.actor, &grads)?;
        Ok(objective)
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.actor_target.soft_update_from(&self.actor, tau);
        for j in 0..2 {
            self.critic_targets[j].soft_update_from(&self.critics[j], tau);
        }
    }

    /// Critic step, then actor and target steps on every `policy_delay`-th critic update.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, cfg: &Td3Config, rng: &mut R) -> Result<UpdateReport> {
        let critic_losses = self.critic_update(batch, cfg, rng)?;
        let mut actor_objective = None;
        if self.critic_updates.is_multiple_of(cfg.policy_delay) {
            let critic = self.critics[0].clone();
            actor_objective = Some(self.actor_update(batch.states.view(), &critic, cfg.actor_logit_penalty)?);
            self.soft_update(cfg.tau);
        }
        Ok(UpdateReport {
            critic_losses,
            actor_objective,
        })
    }

    pub fn to_checkpoint(&self, rng: &ChaCha8Rng, ou: &OuProcess) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            state_dim: self.state_dim,
            layout: self.layout,
            critic_updates: self.critic_updates,
            actor: (&self.actor).into(),
            actor_target: (&self.actor_target).into(),
            critics: [(&self.critics[0]).into(), (&self.critics[1]).into()],
            critic_targets: [(&self.critic_targets[0]).into(), (&self.critic_targets[1]).into()],
            actor_opt: self.actor_opt.to_record(),
            critic_opts: [self.critic_opts[0].to_record(), self.critic_opts[1].to_record()],
            rng: rng.clone(),
            ou: ou.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, ChaCha8Rng, OuProcess)> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(IsacError::Serde(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let [c0, c1] = ck.critics;
        let [t0, t1] = ck.critic_targets;
        let [o0, o1] = ck.critic_opts;
        let actor = DenseNetwork::try_from(ck.actor)?;
        let critics = [DenseNetwork::try_from(c0)?, DenseNetwork::try_from(c1)?];
        let agent = Self {
            actor_opt: Adam::from_record(ck.actor_opt, &actor)?,
            critic_opts: [Adam::from_record(o0, &critics[0])?, Adam::from_record(o1, &critics[1])?],
            actor_target: DenseNetwork::try_from(ck.actor_target)?,
            critic_targets: [DenseNetwork::try_from(t0)?, DenseNetwork::try_from(t1)?],
            actor,
            critics,
            critic_updates: ck.critic_updates,
            layout: ck.layout,
            state_dim: ck.state_dim,
        };
        Ok((agent, ck.rng, ck.ou))
    }
}

/// Versioned JSON checkpoint: networks, optimizer moments, RNG and OU state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub state_dim: usize,
    pub layout: ActionLayout,
    pub critic_updates: u64,
    pub actor: NetworkRecord,
    pub actor_target: NetworkRecord,
    pub critics: [NetworkRecord; 2],
    pub critic_targets: [NetworkRecord; 2],
    pub actor_opt: AdamRecord,
    pub critic_opts: [AdamRecord; 2],
    pub rng: ChaCha8Rng,
    pub ou: OuProcess,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Greedy-rollout summary over a set of scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    /// Mean per-step reward under the environment's own reward model.
    pub mean_reward: f64,
    /// Mean linear CRB (true coupling) over all steps, in dB.
    pub crb_db: f64,
    /// Mean over scenarios of the worst user SINR at the last step, in dB.
    pub min_sinr_db: f64,
    /// Fraction of steps meeting every SINR threshold.
    pub feasibility: f64,
}

/// Averages per-step metrics of rollouts driven by `policy(state, rng) -> raw`.
pub fn rollout<P>(cfg: &EnvConfig, scenarios: &[Scenario], mut policy: P) -> Result<PolicyEvaluation>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let (mut reward, mut crb, mut sinr, mut feasible, mut steps) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for sc in scenarios {
        let mut state = initial_state(sc, cfg);
        let mut last_sinr = f64::NAN;
        for t in 0..cfg.steps_per_episode {
            let raw = policy(&state.to_vec())?;
            let out = env::step(&state, &raw, sc, cfg, t)?;
            reward += out.reward;
            // the CRB is always judged under the physical coupling of the scenario
            let (f, p) = decode_activated(&cfg.layout().activate(&raw)?, cfg)?;
            let truth = evaluate(&f, &p, sc, &sc.crosstalk, cfg)?;
            crb += truth.crb;
            feasible += usize::from(truth.feasible());
            last_sinr = truth.min_sinr_db();
            steps += 1;
            state = out.next;
        }
        sinr += last_sinr;
    }
    let n = steps as f64;
    Ok(PolicyEvaluation {
        mean_reward: reward / n,
        crb_db: linear_to_db(crb / n),
        min_sinr_db: sinr / scenarios.len() as f64,
        feasibility: feasible as f64 / n,
    })
}

/// Noise-free rollouts of the actor.
pub fn evaluate_actor(actor: &DenseNetwork, cfg: &EnvConfig, scenarios: &[Scenario]) -> Result<PolicyEvaluation> {
    rollout(cfg, scenarios, |s| actor.logits(s))
}

/// Rollouts with raw logits drawn uniformly from `[-1, 1]`.
pub fn evaluate_random(cfg: &EnvConfig, scenarios: &[Scenario], rng: &mut ChaCha8Rng) -> Result<PolicyEvaluation> {
    let dim = cfg.layout().dim();
    rollout(cfg, scenarios, |_| Ok((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub mean_step_reward: f64,
    pub episode_reward: f64,
    pub eval: Option<PolicyEvaluation>,
    pub sigma_ou: f64,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Held-out scenarios for greedy evaluation.
    pub eval_scenarios: Vec<Scenario>,
    pub log_wall_time: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub agent: Td3Agent,
    pub log: Vec<EpisodeRecord>,
    pub rng: ChaCha8Rng,
    pub ou: OuProcess,
}

impl TrainingRun {
    /// Mean greedy evaluation reward over the last `n` evaluated episodes.
    pub fn tail_eval_reward(&self, n: usize) -> f64 {
        let evals: Vec<f64> = self.log.iter().filter_map(|r| r.eval.as_ref().map(|e| e.mean_reward)).collect();
        let tail = &evals[evals.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn at_episode(e: IsacError, episode: usize, step: usize) -> IsacError {
    match e {
        IsacError::Divergence(msg) => IsacError::Divergence(format!("episode {episode}, step {step}: {msg}")),
        other => other,
    }
}

/// Trains a fresh agent.
///
/// Warm-up episodes use uniform raw actions in `[-1, 1]` and perform no
/// updates; afterwards every step runs one critic update. The log evaluates
/// every `eval_interval`-th episode and each of the last `tail_episodes`.
pub fn train(env_cfg: &EnvConfig, cfg: &Td3Config, opts: &TrainOptions) -> Result<TrainingRun> {
    train_with(env_cfg, cfg, opts, None)
}

/// As [`train`], continuing from a copy of `initial` instead of fresh networks.
pub fn train_with(env_cfg: &EnvConfig, cfg: &Td3Config, opts: &TrainOptions, initial: Option<&Td3Agent>) -> Result<TrainingRun> {
    env_cfg.validate()?;
    cfg.validate()?;
    let layout = env_cfg.layout();
    let mut agent = match initial {
        Some(a) if a.layout == layout && a.state_dim == env_cfg.state_dim() => a.clone(),
        Some(_) => return Err(IsacError::Config("initial agent does not match the environment dimensions".into())),
        None => Td3Agent::new(env_cfg.state_dim(), layout, cfg, &mut seeds::rng(opts.seed, Stream::NetworkInit, 0))?,
    };
    let mut rng = seeds::rng(opts.seed, Stream::Exploration, 0);
    let mut ou = OuProcess::new(layout.dim(), cfg.ou);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut log = Vec::with_capacity(opts.episodes);
    let started = Instant::now();

    for episode in 0..opts.episodes {
        let (mut state, scenario) = env::reset(seeds::derive(opts.seed, Stream::TrainScenario, episode as u64), env_cfg);
        ou.reset(episode);
        let warmup = episode < cfg.warmup_episodes;
        let mut total = 0.0;
        for t in 0..env_cfg.steps_per_episode {
            let s = state.to_vec();
            let raw: Vec<f64> = if warmup {
                (0..layout.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
            } else {
                let logits = agent.logits(&s)?;
                let noise = ou.sample(&mut rng);
                logits.iter().zip(noise).map(|(l, n)| l + n).collect()
            };
            let out = env::step(&state, &raw, &scenario, env_cfg, t).map_err(|e| at_episode(e, episode, t))?;
            total += out.reward;
            let next = out.next.to_vec();
            buffer.push(Transition {
                state: s,
                action: layout.activate(&raw)?,
                reward: out.reward,
                next_state: next,
                done: out.done,
            });
            if !warmup && buffer.len() >= cfg.batch_size {
                let batch = buffer.sample(cfg.batch_size, &mut rng);
                agent.update(&batch, cfg, &mut rng).map_err(|e| at_episode(e, episode, t))?;
            }
            state = out.next;
        }
        let is_tail = episode + cfg.tail_episodes >= opts.episodes;
        let eval = if !opts.eval_scenarios.is_empty() && ((episode + 1) % cfg.eval_interval == 0 || is_tail) {
            Some(evaluate_actor(&agent.actor, env_cfg, &opts.eval_scenarios)?)
        } else {
            None
        };
        log.push(EpisodeRecord {
            episode,
            mean_step_reward: total / env_cfg.steps_per_episode as f64,
            episode_reward: total,
            eval,
            sigma_ou: if warmup { 0.0 } else { ou.sigma },
            wall_time_s: opts.log_wall_time.then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok(TrainingRun { agent, log, rng, ou })
}

pub const TRAINING_LOG_COLUMNS: [&str; 7] = [
    "episode",
    "mean_step_reward",
    "episode_reward",
    "eval_crb_db",
    "eval_min_sinr_db",
    "sigma_ou",
    "wall_time_s",
];

/// Writes the training log: a `# config_hash=` comment, then CSV.
///
/// Evaluation and wall-time cells are empty for rows without them.
pub fn write_training_log<W: Write>(log: &[EpisodeRecord], config_hash: &str, mut out: W) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAINING_LOG_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in log {
        w.write_record([
            r.episode.to_string(),
            r.mean_step_reward.to_string(),
            r.episode_reward.to_string(),
            opt(r.eval.as_ref().map(|e| e.crb_db)),
            opt(r.eval.as_ref().map(|e| e.min_sinr_db)),
            r.sigma_ou.to_string(),
            opt(r.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::tests::desk_config;
    use crate::nn::{DenseLayer, LayerActivation};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> Td3Config {
        Td3Config {
            actor_hidden: vec![16],
            critic_hidden: vec![16],
            batch_size: 8,
            buffer_capacity: 1000,
            warmup_episodes: 2,
            eval_interval: 2,
            tail_episodes: 2,
            ..Td3Config::default()
        }
    }

    /// Network returning the constant `value` for any input of width `input`.
    fn constant_critic(input: usize, value: f64) -> DenseNetwork {
        DenseNetwork::from_layers(vec![DenseLayer {
            weights: Array2::zeros((input, 1)),
            bias: Array1::from(vec![value]),
            activation: LayerActivation::Uniform(Activation::Identity),
        }])
        .unwrap()
    }

    fn toy_agent(cfg: &Td3Config, seed: u64) -> Td3Agent {
        Td3Agent::new(3, ActionLayout::new(1, 1), cfg, &mut rng(seed)).unwrap()
    }

    fn toy_batch(agent: &Td3Agent, rewards: &[f64], dones: &[bool], seed: u64) -> Batch {
        let mut r = rng(seed);
        let n = rewards.len();
        let ad = agent.layout.dim();
        Batch {
            states: Array2::from_shape_fn((n, agent.state_dim), |_| r.random_range(-1.0..1.0)),
            actions: Array2::from_shape_fn((n, ad), |_| r.random_range(0.0..1.0)),
            rewards: Array1::from(rewards.to_vec()),
            next_states: Array2::from_shape_fn((n, agent.state_dim), |_| r.random_range(-1.0..1.0)),
            dones: dones.iter().map(|d| f64::from(u8::from(*d))).collect(),
        }
    }

    #[test]
    fn ou_schedule_matches_table_values() {
        let ou = OuConfig::default();
        assert!((ou.sigma(0) - 0.105).abs() < 1e-15);
        assert!((ou.sigma(100_000) - 0.005).abs() < 1e-15);
        for z in 0..2000 {
            assert!(ou.sigma(z + 1) <= ou.sigma(z));
            assert!(ou.sigma(z) >= ou.sigma_min);
        }
    }

    #[test]
    fn ou_stationary_mean_is_zero() {
        let mut p = OuProcess::new(1, OuConfig::default());
        let mut r = rng(1);
        for _ in 0..1000 {
            p.sample(&mut r);
        }
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| p.sample(&mut r)[0]).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        // AR(1) with coefficient 1 - θ dt: effective sample size n (1-φ)/(1+φ)
        let phi = 1.0 - 0.15;
        let var = p.sigma.powi(2) / (1.0 - phi * phi);
        let se = (var / (n as f64 * (1.0 - phi) / (1.0 + phi))).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
        let emp_var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((emp_var / var - 1.0).abs() < 0.1);
    }

    #[test]
    fn replay_overwrites_oldest_and_samples_uniformly() {
        let mut buf = ReplayBuffer::new(50);
        let mk = |i: usize| Transition {
            state: vec![i as f64],
            action: vec![0.0],
            reward: i as f64,
            next_state: vec![0.0],
            done: false,
        };
        for i in 0..70 {
            buf.push(mk(i));
        }
        assert_eq!(buf.len(), 50);
        let rewards: Vec<f64> = (0..50).map(|i| buf.get(i).reward).collect();
        assert!(rewards.iter().all(|r| *r >= 20.0));
        assert_eq!(buf.get(0).reward, 50.0);

        let mut counts = [0usize; 50];
        let draws = 100_000;
        for i in buf.sample_indices(draws, &mut rng(2)) {
            counts[i] += 1;
        }
        let expected = draws as f64 / 50.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 49 degrees of freedom
        assert!(chi2 < 74.92, "chi2 = {chi2}");
    }

    #[test]
    fn zero_variance_smoothing_returns_target_policy() {
        let cfg = Td3Config {
            smoothing_variance: 0.0,
            ..small_cfg()
        };
        let agent = toy_agent(&cfg, 3);
        let s = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1);
        let a = agent.smooth_target_action(s.view(), &cfg, &mut rng(4)).unwrap();
        assert_eq!(a, agent.actor_target.forward_batch(s.view()).unwrap());
    }

    #[test]
    fn smoothing_noise_is_clipped_and_seeded() {
        let cfg = small_cfg();
        let mut r = rng(5);
        let (std, c) = (cfg.smoothing_variance.sqrt(), cfg.smoothing_clip);
        let mut clipped = 0;
        for _ in 0..100_000 {
            let z: f64 = StandardNormal.sample(&mut r);
            let eps = (std * z).clamp(-c, c);
            assert!(eps.abs() <= c);
            clipped += usize::from(eps.abs() == c);
        }
        assert!(clipped > 95_000);

        let agent = toy_agent(&cfg, 6);
        let s = Array2::from_elem((2, 3), 0.2);
        let a = agent.smooth_target_action(s.view(), &cfg, &mut rng(7)).unwrap();
        let b = agent.smooth_target_action(s.view(), &cfg, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        let logits = agent.actor_target.logits_batch(s.view()).unwrap();
        let mut r = rng(7);
        let manual = logits.mapv(|v| {
            let z: f64 = StandardNormal.sample(&mut r);
            v + (std * z).clamp(-c, c)
        });
        assert_eq!(a, agent.actor_target.output_activation().apply(&manual));
    }

    #[test]
    fn bellman_targets_by_hand() {
        let cfg = Td3Config {
            discount: 0.9,
            ..small_cfg()
        };
        let mut agent = toy_agent(&cfg, 8);
        let input = agent.state_dim + agent.layout.dim();
        agent.critic_targets = [constant_critic(input, 2.0), constant_critic(input, -1.5)];
        let batch = toy_batch(&agent, &[1.0, 0.25], &[false, true], 9);
        let y = agent.targets(&batch, &cfg, &mut rng(10)).unwrap();
        // twin minimum is -1.5; the done row does not bootstrap
        assert!((y[0] - (1.0 + 0.9 * -1.5)).abs() < 1e-10);
        assert!((y[1] - 0.25).abs() < 1e-10);

        agent.critic_targets = [constant_critic(input, 3.0), constant_critic(input, 3.0)];
        let y = agent.targets(&batch, &cfg, &mut rng(10)).unwrap();
        assert!((y[0] - (1.0 + 0.9 * 3.0)).abs() < 1e-10);
    }

    #[test]
    fn myopic_critics_regress_immediate_reward() {
        let cfg = Td3Config {
            discount: 1e-12,
            critic_lr: 1e-2,
            ..small_cfg()
        };
        let mut agent = toy_agent(&cfg, 11);
        let batch = toy_batch(&agent, &[0.7, -0.3, 1.2, 0.1], &[false; 4], 12);
        let y = agent.targets(&batch, &cfg, &mut rng(13)).unwrap();
        for (a, b) in y.iter().zip(batch.rewards.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let first = agent.critic_update(&batch, &cfg, &mut rng(14)).unwrap();
        let mut last = first;
        for i in 0..500 {
            last = agent.critic_update(&batch, &cfg, &mut rng(15 + i)).unwrap();
        }
        assert!(last[0] < 1e-3 * first[0].max(1e-3) && last[1] < 1e-3 * first[1].max(1e-3), "{first:?} -> {last:?}");
    }

    /// Frozen critic `Q(s, a) = -‖a - a*‖²`.
    struct Bowl(Vec<f64>);

    impl ActionValue for Bowl {
        fn value_and_action_grad(&self, _s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
            let target = Array1::from(self.0.clone());
            let diff = &a - &target;
            Ok((diff.mapv(|d| -d * d).sum_axis(Axis(1)), diff.mapv(|d| -2.0 * d)))
        }
    }

    #[test]
    fn actor_converges_to_analytic_critic_optimum() {
        let cfg = Td3Config {
            actor_lr: 1e-2,
            ..small_cfg()
        };
        let mut agent = toy_agent(&cfg, 16);
        // layout N=1, K=1: [tanh ×2 | softmax ×2 | sigmoid ×1]
        let target = vec![0.5, -0.3, 0.7, 0.3, 0.8];
        let bowl = Bowl(target.clone());
        let states = Array2::from_shape_fn((16, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        for _ in 0..3000 {
            agent.actor_update(states.view(), &bowl, 0.0).unwrap();
        }
        let out = agent.actor.forward_batch(states.view()).unwrap();
        for row in out.rows() {
            for (a, t) in row.iter().zip(&target) {
                assert!((a - t).abs() < 1e-2, "{row:?}");
            }
        }
    }

    #[test]
    fn flat_critic_leaves_actor_unchanged() {
        let cfg = small_cfg();
        let mut agent = toy_agent(&cfg, 17);
        let before = agent.actor.clone();
        let flat = constant_critic(agent.state_dim + agent.layout.dim(), 4.0);
        let states = Array2::from_elem((4, 3), 0.1);
        for _ in 0..5 {
            agent.actor_update(states.view(), &flat, 0.0).unwrap();
        }
        assert_eq!(agent.actor, before);
    }

    #[test]
    fn actor_and_targets_move_only_on_even_critic_updates() {
        let cfg = small_cfg();
        let mut agent = toy_agent(&cfg, 18);
        let batch = toy_batch(&agent, &[0.5, 0.1, -0.2], &[false; 3], 19);
        let mut r = rng(20);
        let (actor0, target0, ctarget0) = (agent.actor.clone(), agent.actor_target.clone(), agent.critic_targets.clone());
        let critic0 = agent.critics[0].clone();
        let rep = agent.update(&batch, &cfg, &mut r).unwrap();
        assert_eq!(agent.critic_updates, 1);
        assert!(rep.actor_objective.is_none());
        assert_eq!(agent.actor, actor0);
        assert_eq!(agent.actor_target, target0);
        assert_eq!(agent.critic_targets, ctarget0);
        assert_ne!(agent.critics[0], critic0);
        let critic_before_actor = agent.critics.clone();
        let rep = agent.update(&batch, &cfg, &mut r).unwrap();
        assert!(rep.actor_objective.is_some());
        assert_ne!(agent.actor, actor0);
        assert_ne!(agent.actor_target, target0);
        // the actor step itself never touches critic parameters
        let mut probe = agent.clone();
        probe.critics = critic_before_actor.clone();
        let snapshot = probe.critics.clone();
        let c0 = probe.critics[0].clone();
        probe.actor_update(batch.states.view(), &c0, 0.0).unwrap();
        assert_eq!(probe.critics, snapshot);
    }

    #[test]
    fn target_lag_contracts_geometrically() {
        let cfg = small_cfg();
        let mut agent = toy_agent(&cfg, 21);
        agent.actor_target = toy_agent(&cfg, 22).actor;
        let mut gap = agent.actor_target.parameter_distance(&agent.actor);
        for _ in 0..100 {
            agent.soft_update(cfg.tau);
            let next = agent.actor_target.parameter_distance(&agent.actor);
            assert!(next <= (1.0 - cfg.tau) * gap + 1e-12);
            gap = next;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = small_cfg();
        let mut agent = toy_agent(&cfg, 23);
        let batch = toy_batch(&agent, &[f64::NAN, 0.0], &[false, false], 24);
        assert!(matches!(agent.critic_update(&batch, &cfg, &mut rng(25)), Err(IsacError::Divergence(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_behaviour() {
        let cfg = small_cfg();
        let mut agent = toy_agent(&cfg, 26);
        let batch = toy_batch(&agent, &[0.5, 0.1, -0.2], &[false; 3], 27);
        let mut r = rng(28);
        for _ in 0..4 {
            agent.update(&batch, &cfg, &mut r).unwrap();
        }
        let ou = OuProcess::new(agent.layout.dim(), cfg.ou);
        let text = agent.to_checkpoint(&r, &ou).to_json().unwrap();
        let (mut back, mut r2, ou2) = Td3Agent::from_checkpoint(Checkpoint::from_json(&text).unwrap()).unwrap();
        assert_eq!(ou2, ou);
        let x = [0.1, -0.4, 0.9];
        assert_eq!(back.actor.forward(&x).unwrap(), agent.actor.forward(&x).unwrap());
        // identical continuation: same RNG, same optimizer moments
        let a = agent.update(&batch, &cfg, &mut r).unwrap();
        let b = back.update(&batch, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(agent.actor, back.actor);
        assert_eq!(agent.critics, back.critics);
    }

    fn tiny_env() -> EnvConfig {
        let mut cfg = desk_config();
        cfg.steps_per_episode = 10;
        cfg.reward_scale = 0.05;
        cfg
    }

    fn tiny_opts(episodes: usize, seed: u64) -> TrainOptions {
        let env_cfg = tiny_env();
        TrainOptions {
            episodes,
            seed,
            eval_scenarios: (0..2).map(|i| env::reset(1000 + i, &env_cfg).1).collect(),
            log_wall_time: false,
        }
    }

    #[test]
    fn warmup_only_training_leaves_networks_at_initialization() {
        let cfg = small_cfg();
        let env_cfg = tiny_env();
        let run = train(&env_cfg, &cfg, &tiny_opts(cfg.warmup_episodes, 1)).unwrap();
        let fresh = Td3Agent::new(env_cfg.state_dim(), env_cfg.layout(), &cfg, &mut seeds::rng(1, Stream::NetworkInit, 0)).unwrap();
        assert_eq!(run.agent.actor, fresh.actor);
        assert_eq!(run.agent.critics, fresh.critics);
        assert_eq!(run.agent.critic_updates, 0);
        assert!(run.log.iter().all(|r| r.sigma_ou == 0.0));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = small_cfg();
        let env_cfg = tiny_env();
        let a = train(&env_cfg, &cfg, &tiny_opts(6, 9)).unwrap();
        let b = train(&env_cfg, &cfg, &tiny_opts(6, 9)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.agent.actor, b.agent.actor);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_training_log(&a.log, "abc", &mut x).unwrap();
        write_training_log(&b.log, "abc", &mut y).unwrap();
        assert_eq!(x, y);
        let text = String::from_utf8(x).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_hash=abc");
        assert_eq!(lines.next().unwrap(), TRAINING_LOG_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 8);
        assert!(a.agent.critic_updates > 0);
        let c = train(&env_cfg, &cfg, &tiny_opts(6, 10)).unwrap();
        assert_ne!(a.log, c.log);
    }
}
