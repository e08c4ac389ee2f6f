//! Experiment runner: configuration profiles, the four strategies, the SNR
//! and aperture sweeps, and result files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{compact_array, ArrayConfig};
use crate::channel::{sample_cn, sample_scenario, CrosstalkParams, Scenario, ScenarioParams};
use crate::env::{self, decode_activated, evaluate, initial_state, EnvConfig, Evaluation};
use crate::error::{IsacError, Result};
use crate::metrics::{linear_to_db, Precoder};
use crate::nn::DenseNetwork;
use crate::seeds::{self, Stream};
use crate::td3::{self, Checkpoint, EpisodeRecord, Td3Agent, Td3Config, TrainOptions, TrainingRun};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CRX_ISAC_THREADS";

/// Full-scale region-sweep reference points `(region in λ, CRB dB)`; reported, never asserted.
pub const REGION_ANCHORS_DB: [(f64, f64); 2] = [(7.5, -63.8), (20.0, -70.9)];

/// Transmit strategy compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyTag {
    /// Random precoders on the half-wavelength ULA.
    #[serde(rename = "FPA_RBF")]
    FpaRbf,
    /// Learned precoder on the half-wavelength ULA.
    #[serde(rename = "FPA_TD3")]
    FpaTd3,
    /// Learned precoder and positions, trained as if there were no crosstalk.
    #[serde(rename = "MA_TD3")]
    MaTd3,
    /// Learned precoder and positions, trained with the true crosstalk.
    #[serde(rename = "CR_MA_TD3")]
    CrMaTd3,
}

impl StrategyTag {
    pub const ALL: [StrategyTag; 4] = [Self::FpaRbf, Self::FpaTd3, Self::MaTd3, Self::CrMaTd3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FpaRbf => "FPA_RBF",
            Self::FpaTd3 => "FPA_TD3",
            Self::MaTd3 => "MA_TD3",
            Self::CrMaTd3 => "CR_MA_TD3",
        }
    }

    pub fn is_learned(self) -> bool {
        self != Self::FpaRbf
    }

    pub fn moves_antennas(self) -> bool {
        matches!(self, Self::MaTd3 | Self::CrMaTd3)
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyTag {
    type Err = IsacError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '+'], "_");
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| IsacError::Config(format!("unknown strategy {s:?}; expected one of FPA_RBF, FPA_TD3, MA_TD3, CR_MA_TD3")))
    }
}

/// Named configuration presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small array and short training for minutes-scale runs.
    Desk,
    /// Full-size system.
    Paper,
}

impl Profile {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Paper => ExperimentConfig::paper(),
        }
    }
}

impl FromStr for Profile {
    type Err = IsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(IsacError::Config(format!("unknown profile {s:?}; expected desk or paper"))),
        }
    }
}

/// Every knob of an experiment.
///
/// The default is the full-size system; [`ExperimentConfig::desk`] shrinks
/// the array, the user count and the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of movable elements `N`.
    pub n_elements: usize,
    /// Number of users `K`.
    pub n_users: usize,
    /// Propagation paths per user `L_p`.
    pub n_paths: usize,
    pub carrier_frequency_ghz: f64,
    /// Lower boundary of the moving region in meters.
    pub region_min_m: f64,
    /// Upper boundary of the moving region in meters.
    pub region_max_m: f64,
    /// Estimation samples `L`.
    pub n_samples: usize,
    /// Target reflection coefficient `α_s` (real).
    pub alpha_s: f64,
    pub theta_s_deg: f64,
    pub p_sum_dbm: f64,
    /// SNR `P_sum / N_0` used for training and the default evaluation.
    pub snr_db: f64,
    /// Per-user SINR threshold `Γ_k`.
    pub sinr_threshold_db: f64,
    /// Penalty factor `υ`.
    pub upsilon: f64,
    /// Clutter power `σ_c²` added to the sensing noise.
    pub clutter_variance: f64,
    pub steps_per_episode: usize,
    pub episodes: usize,
    /// Held-out scenarios per seed used to evaluate every strategy.
    pub eval_scenarios: usize,
    /// Reward multiplier; derived from the aperture when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_scale: Option<f64>,
    /// Append `θ_s` to the agent's state.
    pub observe_target: bool,
    /// Default strategy of the `train` and `sweep-region` commands.
    pub strategy: StrategyTag,
    pub snr_grid_db: Vec<f64>,
    /// Moving-region widths in wavelengths.
    pub region_grid_lambda: Vec<f64>,
    /// Continue each region point from the previous point's agent instead of training afresh.
    pub region_finetune: bool,
    pub seeds: Vec<u64>,
    /// Random precoders averaged per FPA_RBF evaluation.
    pub rbf_draws: usize,
    pub crosstalk: CrosstalkParams,
    pub td3: Td3Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ExperimentConfig {
    pub fn paper() -> Self {
        Self {
            n_elements: 16,
            n_users: 4,
            n_paths: 3,
            carrier_frequency_ghz: 30.0,
            region_min_m: 0.0,
            region_max_m: 0.15,
            n_samples: 128,
            alpha_s: 0.4,
            theta_s_deg: 60.0,
            p_sum_dbm: 10.0,
            snr_db: 10.0,
            sinr_threshold_db: 5.0,
            upsilon: 0.1,
            clutter_variance: 0.0,
            steps_per_episode: 100,
            episodes: 500,
            eval_scenarios: 8,
            reward_scale: None,
            observe_target: false,
            strategy: StrategyTag::CrMaTd3,
            snr_grid_db: vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0],
            region_grid_lambda: vec![7.5, 10.0, 12.5, 15.0, 17.5, 20.0],
            region_finetune: false,
            seeds: vec![0, 1, 2],
            rbf_draws: 10_000,
            crosstalk: CrosstalkParams::default(),
            td3: Td3Config {
                actor_logit_penalty: 1e-3,
                ..Td3Config::default()
            },
        }
    }

    pub fn desk() -> Self {
        let paper = Self::paper();
        Self {
            n_elements: 8,
            n_users: 2,
            n_paths: 2,
            episodes: 300,
            eval_scenarios: 4,
            region_grid_lambda: vec![5.0, 8.0, 11.0, 15.0],
            td3: Td3Config {
                actor_hidden: vec![64, 64],
                critic_hidden: vec![64, 64],
                batch_size: 64,
                critic_lr: 1e-3,
                ..paper.td3.clone()
            },
            ..paper
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / (self.carrier_frequency_ghz * 1e9)
    }

    pub fn p_sum_watts(&self) -> f64 {
        1e-3 * 10f64.powf(self.p_sum_dbm / 10.0)
    }

    /// `N_0 = P_sum / SNR`.
    pub fn noise_power(&self, snr_db: f64) -> f64 {
        self.p_sum_watts() / 10f64.powf(snr_db / 10.0)
    }

    pub fn array_config(&self) -> Result<ArrayConfig> {
        ArrayConfig::with_half_wavelength_spacing(self.n_elements, self.wavelength(), self.region_min_m, self.region_max_m)
    }

    /// Copy whose moving region spans `lambdas` wavelengths from `region_min_m`.
    pub fn with_region(&self, lambdas: f64) -> Self {
        Self {
            region_max_m: self.region_min_m + lambdas * self.wavelength(),
            ..self.clone()
        }
    }

    /// Reward multiplier: the configured one, or the inverse of `P k² sin²θ_s (W/2)²` for aperture `W`.
    pub fn effective_reward_scale(&self) -> f64 {
        self.reward_scale.unwrap_or_else(|| {
            let k = 2.0 * std::f64::consts::PI / self.wavelength();
            let half = (self.region_max_m - self.region_min_m) / 2.0;
            let s = self.theta_s_deg.to_radians().sin();
            1.0 / (self.p_sum_watts() * k * k * s * s * half * half)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(IsacError::Config(msg));
        if self.n_elements == 0 || self.n_users == 0 || self.n_paths == 0 {
            return bad("element, user and path counts must be positive".into());
        }
        if !(self.carrier_frequency_ghz > 0.0) {
            return bad("carrier frequency must be positive".into());
        }
        if self.n_samples == 0 || self.steps_per_episode == 0 || self.eval_scenarios == 0 || self.rbf_draws == 0 {
            return bad("sample, step, scenario and draw counts must be positive".into());
        }
        if !(self.alpha_s != 0.0 && self.alpha_s.is_finite()) {
            return bad("the target reflection coefficient must be nonzero".into());
        }
        if !(self.upsilon >= 0.0) || !(self.clutter_variance >= 0.0) {
            return bad("penalty factor and clutter power must be nonnegative".into());
        }
        if let Some(s) = self.reward_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("reward scale must be positive, got {s}"));
            }
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let min_region = (self.n_elements - 1) as f64 * self.wavelength() / 2.0;
        for &r in &self.region_grid_lambda {
            if !(r * self.wavelength() >= min_region - crate::array::GEOMETRY_TOLERANCE) {
                return bad(format!(
                    "region of {r} wavelengths is smaller than the minimum aperture of {} wavelengths",
                    (self.n_elements - 1) as f64 / 2.0
                ));
            }
        }
        self.crosstalk.validate()?;
        self.td3.validate()?;
        self.env_config(self.strategy)?.validate()
    }

    /// Environment a strategy trains in.
    ///
    /// Scenarios always carry the physical crosstalk; MA_TD3's reward assumes none.
    pub fn env_config(&self, strategy: StrategyTag) -> Result<EnvConfig> {
        let noise = self.noise_power(self.snr_db);
        Ok(EnvConfig {
            gamma_k: vec![10f64.powf(self.sinr_threshold_db / 10.0); self.n_users],
            p_sum: self.p_sum_watts(),
            upsilon: self.upsilon,
            steps_per_episode: self.steps_per_episode,
            array: self.array_config()?,
            crosstalk: if strategy == StrategyTag::MaTd3 {
                CrosstalkParams::disabled()
            } else {
                self.crosstalk
            },
            scenario: ScenarioParams {
                n_users: self.n_users,
                n_paths: self.n_paths,
                theta_s: self.theta_s_deg.to_radians(),
                alpha_s: Complex64::new(self.alpha_s, 0.0),
                sigma2_s: noise,
                sigma2_c: self.clutter_variance,
                sigma2_user: noise,
                crosstalk: self.crosstalk,
                n_samples: self.n_samples,
            },
            reward_scale: self.effective_reward_scale(),
            freeze_positions: !strategy.moves_antennas(),
            sensing_streams: true,
            observe_target: self.observe_target,
        })
    }

    /// Held-out scenarios of `seed`, shared by every strategy.
    pub fn eval_scenarios(&self, seed: u64) -> Result<Vec<Scenario>> {
        let params = self.env_config(self.strategy)?.scenario;
        Ok((0..self.eval_scenarios as u64)
            .map(|i| sample_scenario(&mut seeds::rng(seed, Stream::EvalScenario, i), &params))
            .collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Parses a possibly partial TOML document layered over `base`.
    pub fn from_toml_over(text: &str, base: &ExperimentConfig) -> Result<Self> {
        let overlay: toml::Table = text.parse()?;
        let mut merged = toml::Table::try_from(base)?;
        merge_tables(&mut merged, overlay);
        let cfg: ExperimentConfig = merged.try_into()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Dotted field paths whose values differ from `base`, with the new values.
    pub fn overrides(&self, base: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
        let mine = toml::Table::try_from(self)?;
        let theirs = toml::Table::try_from(base)?;
        let mut out = BTreeMap::new();
        diff_tables("", &mine, &theirs, &mut out);
        Ok(out)
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(inner)), toml::Value::Table(over)) => merge_tables(inner, over),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn diff_tables(prefix: &str, mine: &toml::Table, theirs: &toml::Table, out: &mut BTreeMap<String, String>) {
    let keys: std::collections::BTreeSet<&String> = mine.keys().chain(theirs.keys()).collect();
    for key in keys {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (mine.get(key), theirs.get(key)) {
            (Some(toml::Value::Table(a)), Some(toml::Value::Table(b))) => diff_tables(&path, a, b, out),
            (Some(a), Some(b)) if a == b => {}
            (Some(a), _) => {
                out.insert(path, a.to_string());
            }
            (None, Some(_)) => {
                out.insert(path, "unset".into());
            }
            (None, None) => {}
        }
    }
}

/// Worker pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| IsacError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(IsacError::Config(format!("{THREADS_ENV} must be positive")));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| IsacError::Config(format!("cannot start worker pool: {e}")))
}

/// How a strategy chooses `(F, p)`.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Circular-Gaussian precoders scaled to the full budget on the ULA, drawn from `seed`.
    RandomBeamforming { seed: u64, draws: usize },
    /// Greedy rollout of a trained actor.
    Actor(DenseNetwork),
}

/// Averages of one strategy on a set of scenarios at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    /// dB of the mean linear CRB under the physical crosstalk.
    pub crb_db: f64,
    /// Mean reward under the strategy's own reward model.
    pub mean_reward: f64,
    /// dB of the mean linear SINR of each user.
    pub sinr_db: Vec<f64>,
    /// Fraction of decisions meeting every SINR threshold.
    pub feasibility: f64,
}

#[derive(Default)]
struct Accumulator {
    crb: f64,
    reward: f64,
    sinr: Vec<f64>,
    feasible: usize,
    count: usize,
}

impl Accumulator {
    fn add(&mut self, truth: &Evaluation, reward: f64) {
        if self.sinr.is_empty() {
            self.sinr = vec![0.0; truth.sinr.len()];
        }
        self.crb += truth.crb;
        self.reward += reward;
        for (acc, s) in self.sinr.iter_mut().zip(&truth.sinr) {
            *acc += s;
        }
        self.feasible += usize::from(truth.feasible());
        self.count += 1;
    }

    fn finish(self) -> Assessment {
        let n = self.count as f64;
        Assessment {
            crb_db: linear_to_db(self.crb / n),
            mean_reward: self.reward / n,
            sinr_db: self.sinr.iter().map(|s| linear_to_db(s / n)).collect(),
            feasibility: self.feasible as f64 / n,
        }
    }
}

impl Policy {
    /// Evaluates the policy on `scenarios` with every noise power set to `noise`.
    pub fn assess(&self, env_cfg: &EnvConfig, scenarios: &[Scenario], noise: f64) -> Result<Assessment> {
        if scenarios.is_empty() {
            return Err(IsacError::Config("assessment needs at least one scenario".into()));
        }
        let scenarios: Vec<Scenario> = scenarios.iter().map(|s| s.with_noise(noise)).collect();
        let mut acc = Accumulator::default();
        match self {
            Policy::RandomBeamforming { seed, draws } => {
                let mut rng = seeds::rng(*seed, Stream::RandomPrecoder, 0);
                let positions = compact_array(&env_cfg.array);
                let (n, streams) = (env_cfg.array.n_elements, env_cfg.layout().streams());
                for i in 0..*draws {
                    let sc = &scenarios[i % scenarios.len()];
                    let f = Array2::from_shape_fn((n, streams), |_| sample_cn(&mut rng, 1.0));
                    let scale = (env_cfg.p_sum / f.iter().map(|x| x.norm_sqr()).sum::<f64>()).sqrt();
                    let f = Precoder::new(f.mapv(|x| x * scale), env_cfg.n_users(), env_cfg.p_sum)?;
                    let truth = evaluate(&f, &positions, sc, &sc.crosstalk, env_cfg)?;
                    let own = evaluate(&f, &positions, sc, &env_cfg.crosstalk, env_cfg)?;
                    acc.add(&truth, own.reward);
                }
            }
            Policy::Actor(actor) => {
                let layout = env_cfg.layout();
                for sc in &scenarios {
                    let mut state = initial_state(sc, env_cfg);
                    for t in 0..env_cfg.steps_per_episode {
                        let raw = actor.logits(&state.to_vec())?;
                        let out = env::step(&state, &raw, sc, env_cfg, t)?;
                        let (f, p) = decode_activated(&layout.activate(&raw)?, env_cfg)?;
                        let truth = evaluate(&f, &p, sc, &sc.crosstalk, env_cfg)?;
                        acc.add(&truth, out.reward);
                        state = out.next;
                    }
                }
            }
        }
        Ok(acc.finish())
    }
}

/// One strategy prepared for one seed.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: StrategyTag,
    pub seed: u64,
    pub env: EnvConfig,
    /// Held-out evaluation scenarios.
    pub scenarios: Vec<Scenario>,
    pub policy: Policy,
    /// Present for learned strategies trained in this process.
    pub training: Option<TrainingRun>,
}

impl StrategyRun {
    pub fn assess(&self, cfg: &ExperimentConfig, snr_db: f64) -> Result<Assessment> {
        self.policy.assess(&self.env, &self.scenarios, cfg.noise_power(snr_db))
    }

    pub fn record(&self, cfg: &ExperimentConfig, snr_db: f64) -> Result<EvaluationRecord> {
        let a = self.assess(cfg, snr_db)?;
        Ok(EvaluationRecord {
            strategy: self.strategy,
            seed: self.seed,
            snr_db,
            region_lambda: (self.env.array.p_max - self.env.array.p_min) / self.env.array.wavelength,
            crb_db: a.crb_db,
            mean_reward: a.mean_reward,
            feasibility: a.feasibility,
            sinr_db: a.sinr_db,
        })
    }

    pub fn training_log(&self) -> Option<&[EpisodeRecord]> {
        self.training.as_ref().map(|t| t.log.as_slice())
    }

    pub fn checkpoint(&self) -> Option<Checkpoint> {
        self.training.as_ref().map(|t| t.agent.to_checkpoint(&t.rng, &t.ou))
    }

    /// Rebuilds a learned strategy from a saved checkpoint without training.
    pub fn from_checkpoint(strategy: StrategyTag, cfg: &ExperimentConfig, seed: u64, ck: Checkpoint) -> Result<Self> {
        let env = cfg.env_config(strategy)?;
        let (agent, _, _) = Td3Agent::from_checkpoint(ck)?;
        if agent.layout != env.layout() || agent.state_dim != env.state_dim() {
            return Err(IsacError::Config("checkpoint does not match the configured system size".into()));
        }
        Ok(Self {
            strategy,
            seed,
            scenarios: cfg.eval_scenarios(seed)?,
            env,
            policy: Policy::Actor(agent.actor),
            training: None,
        })
    }
}

/// Trains (if learned) and prepares `strategy` for `seed`.
pub fn run_strategy(strategy: StrategyTag, cfg: &ExperimentConfig, seed: u64) -> Result<StrategyRun> {
    run_strategy_from(strategy, cfg, seed, None)
}

fn run_strategy_from(strategy: StrategyTag, cfg: &ExperimentConfig, seed: u64, initial: Option<&Td3Agent>) -> Result<StrategyRun> {
    cfg.validate()?;
    let env = cfg.env_config(strategy)?;
    let scenarios = cfg.eval_scenarios(seed)?;
    if !strategy.is_learned() {
        return Ok(StrategyRun {
            strategy,
            seed,
            env,
            scenarios,
            policy: Policy::RandomBeamforming { seed, draws: cfg.rbf_draws },
            training: None,
        });
    }
    let opts = TrainOptions {
        episodes: cfg.episodes,
        seed,
        eval_scenarios: scenarios.clone(),
        log_wall_time: false,
    };
    let run = td3::train_with(&env, &cfg.td3, &opts, initial)?;
    Ok(StrategyRun {
        strategy,
        seed,
        env,
        scenarios,
        policy: Policy::Actor(run.agent.actor.clone()),
        training: Some(run),
    })
}

/// Mean reward of uniform raw actions in `[-1, 1]` on the held-out scenarios of `seed`.
pub fn random_policy_reward(strategy: StrategyTag, cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    let env = cfg.env_config(strategy)?;
    let mut rng = seeds::rng(seed, Stream::RandomBaseline, 0);
    Ok(td3::evaluate_random(&env, &cfg.eval_scenarios(seed)?, &mut rng)?.mean_reward)
}

/// One evaluated (strategy, seed, SNR, region) point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub strategy: StrategyTag,
    pub seed: u64,
    pub snr_db: f64,
    pub region_lambda: f64,
    pub crb_db: f64,
    pub mean_reward: f64,
    pub feasibility: f64,
    /// Per-user SINR in dB.
    pub sinr_db: Vec<f64>,
}

/// Prepares every `(strategy, seed)` pair in parallel, in a deterministic order.
pub fn run_strategies(strategies: &[StrategyTag], cfg: &ExperimentConfig) -> Result<Vec<StrategyRun>> {
    cfg.validate()?;
    let jobs: Vec<(StrategyTag, u64)> = strategies
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    thread_pool()?.install(|| jobs.par_iter().map(|&(s, seed)| run_strategy(s, cfg, seed)).collect())
}

/// Evaluates each prepared run over the SNR grid without retraining.
pub fn snr_records(runs: &[StrategyRun], cfg: &ExperimentConfig) -> Result<Vec<EvaluationRecord>> {
    if cfg.snr_grid_db.is_empty() {
        return Err(IsacError::Config("SNR grid is empty".into()));
    }
    let mut out = Vec::with_capacity(runs.len() * cfg.snr_grid_db.len());
    for run in runs {
        for &snr in &cfg.snr_grid_db {
            out.push(run.record(cfg, snr)?);
        }
    }
    Ok(out)
}

/// Trains every strategy once per seed, then evaluates across the SNR grid.
pub fn snr_sweep(cfg: &ExperimentConfig, strategies: &[StrategyTag]) -> Result<(Vec<StrategyRun>, Vec<EvaluationRecord>)> {
    if cfg.snr_grid_db.is_empty() {
        return Err(IsacError::Config("SNR grid is empty".into()));
    }
    let runs = run_strategies(strategies, cfg)?;
    let records = snr_records(&runs, cfg)?;
    Ok((runs, records))
}

/// Trains `cfg.strategy` at every region width and seed and evaluates at `cfg.snr_db`.
///
/// Every grid point is validated before any training starts.
pub fn region_sweep(cfg: &ExperimentConfig) -> Result<(Vec<StrategyRun>, Vec<EvaluationRecord>)> {
    if cfg.region_grid_lambda.is_empty() {
        return Err(IsacError::Config("region grid is empty".into()));
    }
    cfg.validate()?;
    let points: Vec<ExperimentConfig> = cfg.region_grid_lambda.iter().map(|&r| cfg.with_region(r)).collect();
    for p in &points {
        p.validate()?;
    }
    let per_seed: Vec<Vec<StrategyRun>> = thread_pool()?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let mut runs: Vec<StrategyRun> = Vec::with_capacity(points.len());
                for p in &points {
                    let previous = if cfg.region_finetune {
                        runs.last().and_then(|r| r.training.as_ref()).map(|t| &t.agent)
                    } else {
                        None
                    };
                    let run = run_strategy_from(cfg.strategy, p, seed, previous)?;
                    runs.push(run);
                }
                Ok(runs)
            })
            .collect::<Result<_>>()
    })?;
    let mut runs = Vec::new();
    let mut records = Vec::new();
    for seed_runs in per_seed {
        for (run, p) in seed_runs.into_iter().zip(&points) {
            records.push(run.record(p, cfg.snr_db)?);
            runs.push(run);
        }
    }
    Ok((runs, records))
}

/// Mean CRB dB over seeds for each `(strategy, x)` where `x` is chosen by `axis`.
pub fn summarize(records: &[EvaluationRecord], axis: SweepAxis) -> Vec<(StrategyTag, f64, f64)> {
    let mut groups: BTreeMap<(StrategyTag, u64), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let x = axis.value(r);
        let e = groups.entry((r.strategy, x.to_bits())).or_insert((x, 0.0, 0));
        e.1 += r.crb_db;
        e.2 += 1;
    }
    let mut out: Vec<(StrategyTag, f64, f64)> =
        groups.into_iter().map(|((s, _), (x, sum, n))| (s, x, sum / n as f64)).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    out
}

/// Independent variable of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Snr,
    Region,
}

impl SweepAxis {
    fn value(self, r: &EvaluationRecord) -> f64 {
        match self {
            SweepAxis::Snr => r.snr_db,
            SweepAxis::Region => r.region_lambda,
        }
    }

    fn label(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr_db",
            SweepAxis::Region => "region_lambda",
        }
    }
}

const RECORD_COLUMNS: [&str; 7] = ["strategy", "seed", "snr_db", "region_lambda", "crb_db", "mean_reward", "feasibility"];

/// Writes records as CSV after a `# config_hash=` comment line.
///
/// Per-user SINR columns `sinr_db_1..K` follow the fixed columns.
pub fn write_records<W: Write>(records: &[EvaluationRecord], config_hash: &str, mut out: W) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let users = records.first().map_or(0, |r| r.sinr_db.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = RECORD_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=users).map(|k| format!("sinr_db_{k}")));
    w.write_record(&header)?;
    for r in records {
        if r.sinr_db.len() != users {
            return Err(IsacError::Dimension {
                what: "per-user SINR columns",
                expected: users,
                got: r.sinr_db.len(),
            });
        }
        let mut row = vec![
            r.strategy.to_string(),
            r.seed.to_string(),
            r.snr_db.to_string(),
            r.region_lambda.to_string(),
            r.crb_db.to_string(),
            r.mean_reward.to_string(),
            r.feasibility.to_string(),
        ];
        row.extend(r.sinr_db.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the output of [`write_records`], returning the config hash and the records.
pub fn read_records<R: Read>(input: R) -> Result<(String, Vec<EvaluationRecord>)> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let hash = first
        .trim_end()
        .strip_prefix("# config_hash=")
        .ok_or_else(|| IsacError::Serde("missing config hash line".into()))?
        .to_string();
    let mut csv = csv::Reader::from_reader(reader);
    let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| IsacError::Serde(format!("bad number {s:?}"))) };
    let mut records = Vec::new();
    for row in csv.records() {
        let row = row?;
        if row.len() < RECORD_COLUMNS.len() {
            return Err(IsacError::Serde("short record row".into()));
        }
        records.push(EvaluationRecord {
            strategy: row[0].parse()?,
            seed: row[1].parse().map_err(|_| IsacError::Serde(format!("bad seed {:?}", &row[1])))?,
            snr_db: parse(&row[2])?,
            region_lambda: parse(&row[3])?,
            crb_db: parse(&row[4])?,
            mean_reward: parse(&row[5])?,
            feasibility: parse(&row[6])?,
            sinr_db: row.iter().skip(RECORD_COLUMNS.len()).map(parse).collect::<Result<_>>()?,
        });
    }
    Ok((hash, records))
}

/// Gnuplot table: one row per `x`, one mean-CRB column per strategy.
pub fn write_plot_data<W: Write>(records: &[EvaluationRecord], axis: SweepAxis, mut out: W) -> Result<()> {
    let summary = summarize(records, axis);
    let strategies: Vec<StrategyTag> = {
        let mut s: Vec<StrategyTag> = summary.iter().map(|r| r.0).collect();
        s.dedup();
        s
    };
    let mut xs: Vec<f64> = summary.iter().map(|r| r.1).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    write!(out, "# {}", axis.label())?;
    for s in &strategies {
        write!(out, " {s}")?;
    }
    writeln!(out)?;
    for x in xs {
        write!(out, "{x}")?;
        for s in &strategies {
            match summary.iter().find(|r| r.0 == *s && r.1 == x) {
                Some(r) => write!(out, " {}", r.2)?,
                None => write!(out, " NaN")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Gnuplot table of a training log: episode, mean step reward, greedy evaluation reward.
pub fn write_training_plot_data<W: Write>(log: &[EpisodeRecord], mut out: W) -> Result<()> {
    writeln!(out, "# episode mean_step_reward eval_reward")?;
    for r in log {
        let eval = r.eval.as_ref().map_or("NaN".to_string(), |e| e.mean_reward.to_string());
        writeln!(out, "{} {} {}", r.episode, r.mean_step_reward, eval)?;
    }
    Ok(())
}

/// Provenance of a command invocation recorded in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub command: String,
    pub profile: Profile,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    profile: Profile,
    version: &'static str,
    config_hash: String,
    overrides: BTreeMap<String, String>,
    seeds: &'a [u64],
    wall_time_s: f64,
    reference_region_crb_db: BTreeMap<String, f64>,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

/// Writes result CSVs, plot data and `manifest.json` into `dir`; returns the written paths.
///
/// `records` may be empty for training-only runs; the CSV and plot files
/// named by `name` are then skipped.
pub fn emit_results(
    dir: &Path,
    name: &str,
    cfg: &ExperimentConfig,
    info: &RunInfo,
    records: &[EvaluationRecord],
    axis: Option<SweepAxis>,
    runs: &[StrategyRun],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash()?;
    let mut files = Vec::new();
    let mut create = |file: String| -> Result<(PathBuf, fs::File)> {
        let path = dir.join(&file);
        let f = fs::File::create(&path)?;
        files.push(path.clone());
        Ok((path, f))
    };
    if !records.is_empty() {
        let (_, f) = create(format!("{name}.csv"))?;
        write_records(records, &hash, std::io::BufWriter::new(f))?;
        if let Some(axis) = axis {
            let (_, f) = create(format!("{name}.dat"))?;
            write_plot_data(records, axis, std::io::BufWriter::new(f))?;
        }
    }
    for run in runs {
        if let Some(log) = run.training_log() {
            let stem = format!("training_{}_seed{}_region{}", run.strategy, run.seed, region_tag(&run.env));
            let (_, f) = create(format!("{stem}.csv"))?;
            td3::write_training_log(log, &hash, std::io::BufWriter::new(f))?;
            let (_, f) = create(format!("{stem}.dat"))?;
            write_training_plot_data(log, std::io::BufWriter::new(f))?;
        }
    }
    let manifest_path = dir.join("manifest.json");
    let manifest = Manifest {
        command: &info.command,
        profile: info.profile,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hash,
        overrides: cfg.overrides(&info.profile.config())?,
        seeds: &cfg.seeds,
        wall_time_s: info.wall_time_s,
        reference_region_crb_db: REGION_ANCHORS_DB.iter().map(|(r, v)| (format!("{r}_lambda"), *v)).collect(),
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        config: cfg,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    files.push(manifest_path);
    Ok(files)
}

/// Region width in wavelengths, rounded for file names.
pub fn region_tag(env: &EnvConfig) -> String {
    let r = (env.array.p_max - env.array.p_min) / env.array.wavelength;
    format!("{}", (r * 100.0).round() / 100.0)
}

/// Writes one checkpoint file per trained run; returns the paths.
pub fn save_checkpoints(dir: &Path, runs: &[StrategyRun]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for run in runs {
        if let Some(ck) = run.checkpoint() {
            let path = dir.join(checkpoint_name(run.strategy, run.seed));
            fs::write(&path, ck.to_json()?)?;
            out.push(path);
        }
    }
    Ok(out)
}

pub fn checkpoint_name(strategy: StrategyTag, seed: u64) -> String {
    format!("checkpoint_{strategy}_seed{seed}.json")
}

/// [`load_or_run`] for every `(strategy, seed)` pair, in parallel and in a deterministic order.
pub fn load_or_run_all(dir: &Path, strategies: &[StrategyTag], cfg: &ExperimentConfig) -> Result<Vec<StrategyRun>> {
    cfg.validate()?;
    let jobs: Vec<(StrategyTag, u64)> = strategies
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    thread_pool()?.install(|| jobs.par_iter().map(|&(s, seed)| load_or_run(dir, s, cfg, seed)).collect())
}

/// Loads the checkpoint for `(strategy, seed)` from `dir` if present, otherwise runs the strategy.
pub fn load_or_run(dir: &Path, strategy: StrategyTag, cfg: &ExperimentConfig, seed: u64) -> Result<StrategyRun> {
    let path = dir.join(checkpoint_name(strategy, seed));
    if strategy.is_learned() && path.exists() {
        let ck = Checkpoint::from_json(&fs::read_to_string(&path)?)?;
        StrategyRun::from_checkpoint(strategy, cfg, seed, ck)
    } else {
        run_strategy(strategy, cfg, seed)
    }
}
