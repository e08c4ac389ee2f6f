//! Episodic decision process: state assembly, feasible-by-construction action
//! decoding, the penalized sensing reward and episode stepping.
//!
//! Raw actions are unbounded logits laid out as
//! `[phase: N·(K+N) column-major | power: K+N | displacement: N]`.
//! The network-side activations (`tanh`, `softmax`, `sigmoid`) turn them into
//! the activated action, and [`decode_activated`] maps that onto a precoder
//! and an antenna layout that satisfy spacing, region and power constraints
//! exactly.

use std::f64::consts::PI;
use std::io::Write;
use std::ops::Range;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{compact_array, displacements_to_positions, AntennaPositions, ArrayConfig, DisplacementVector};
use crate::channel::{
    coupling_matrix, effective_sensing_channel, sample_scenario, user_channel, CrosstalkParams, Scenario,
    ScenarioParams,
};
use crate::error::{IsacError, Result};
use crate::metrics::{crb_db, crb_from_core, linear_to_db, sinr, Precoder, SensingForms};
use crate::nn::{Activation, LayerActivation, Segment};

/// Sigmoid outputs are clamped this far from 0 and 1 before taking odds.
const ODDS_CLAMP: f64 = 1e-12;

/// Partition of the action vector for `N` elements and `K` users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionLayout {
    pub n_elements: usize,
    pub n_users: usize,
}

impl ActionLayout {
    pub fn new(n_elements: usize, n_users: usize) -> Self {
        Self { n_elements, n_users }
    }

    /// Columns of `F`, `K + N`.
    pub fn streams(&self) -> usize {
        self.n_users + self.n_elements
    }

    pub fn phase_range(&self) -> Range<usize> {
        0..self.n_elements * self.streams()
    }

    pub fn power_range(&self) -> Range<usize> {
        let start = self.phase_range().end;
        start..start + self.streams()
    }

    pub fn displacement_range(&self) -> Range<usize> {
        let start = self.power_range().end;
        start..start + self.n_elements
    }

    pub fn dim(&self) -> usize {
        self.displacement_range().end
    }

    /// Terminal activation map realizing the decoding contract inside a network.
    pub fn output_activation(&self) -> LayerActivation {
        let seg = |r: Range<usize>, activation| Segment {
            start: r.start,
            len: r.len(),
            activation,
        };
        LayerActivation::Segmented(vec![
            seg(self.phase_range(), Activation::Tanh),
            seg(self.power_range(), Activation::Softmax),
            seg(self.displacement_range(), Activation::Sigmoid),
        ])
    }

    /// Applies the terminal activations to one raw action.
    pub fn activate(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check(raw.len())?;
        let row = Array2::from_shape_vec((1, raw.len()), raw.to_vec()).expect("row vector");
        Ok(self.output_activation().apply(&row).into_raw_vec_and_offset().0)
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(IsacError::Dimension {
                what: "action",
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Static environment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Linear SINR thresholds `Γ_k`.
    pub gamma_k: Vec<f64>,
    pub p_sum: f64,
    /// Penalty factor `υ`.
    pub upsilon: f64,
    pub steps_per_episode: usize,
    pub array: ArrayConfig,
    /// Coupling model the reward assumes; the physical truth lives in each scenario.
    pub crosstalk: CrosstalkParams,
    /// Distribution scenarios are drawn from at reset.
    pub scenario: ScenarioParams,
    /// Positive factor applied to the whole reward.
    pub reward_scale: f64,
    /// Keep the minimum-spacing ULA and ignore displacement logits.
    pub freeze_positions: bool,
    /// When false the sensing columns of `F` carry no power.
    pub sensing_streams: bool,
    /// Append `θ_s` to the state.
    pub observe_target: bool,
}

impl EnvConfig {
    pub fn layout(&self) -> ActionLayout {
        ActionLayout::new(self.array.n_elements, self.scenario.n_users)
    }

    pub fn n_users(&self) -> usize {
        self.scenario.n_users
    }

    pub fn state_dim(&self) -> usize {
        3 * self.scenario.n_users * self.scenario.n_paths + self.layout().dim() + usize::from(self.observe_target)
    }

    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.crosstalk.validate()?;
        self.scenario.crosstalk.validate()?;
        if self.steps_per_episode == 0 {
            return Err(IsacError::Config("steps_per_episode must be at least 1".into()));
        }
        if !(self.upsilon >= 0.0) {
            return Err(IsacError::Config(format!("penalty factor must be nonnegative, got {}", self.upsilon)));
        }
        if !(self.p_sum > 0.0) {
            return Err(IsacError::Config(format!("power budget must be positive, got {}", self.p_sum)));
        }
        if !(self.reward_scale > 0.0) || !self.reward_scale.is_finite() {
            return Err(IsacError::Config(format!("reward scale must be positive, got {}", self.reward_scale)));
        }
        if self.gamma_k.len() != self.scenario.n_users {
            return Err(IsacError::Dimension {
                what: "SINR thresholds",
                expected: self.scenario.n_users,
                got: self.gamma_k.len(),
            });
        }
        if self.gamma_k.iter().any(|g| !(*g >= 0.0)) {
            return Err(IsacError::Config("SINR thresholds must be nonnegative".into()));
        }
        if self.scenario.n_users == 0 || self.scenario.n_paths == 0 {
            return Err(IsacError::Config("need at least one user and one path".into()));
        }
        Ok(())
    }
}

/// Observation: user-channel features followed by the previous activated action.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub rho_re: Vec<f64>,
    pub rho_im: Vec<f64>,
    pub theta_flat: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub target_angle: Option<f64>,
}

impl EnvState {
    fn from_scenario(scenario: &Scenario, cfg: &EnvConfig, prev_action: Vec<f64>) -> Self {
        let paths = scenario.users.iter().flat_map(|u| u.gains.iter().zip(&u.angles));
        let (mut rho_re, mut rho_im, mut theta_flat) = (Vec::new(), Vec::new(), Vec::new());
        for (g, a) in paths {
            rho_re.push(g.re);
            rho_im.push(g.im);
            theta_flat.push(*a);
        }
        Self {
            rho_re,
            rho_im,
            theta_flat,
            prev_action,
            target_angle: cfg.observe_target.then_some(scenario.theta_s),
        }
    }

    pub fn dim(&self) -> usize {
        self.rho_re.len() + self.rho_im.len() + self.theta_flat.len() + self.prev_action.len() + usize::from(self.target_angle.is_some())
    }

    /// Flat feature vector fed to the networks.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.rho_re);
        v.extend_from_slice(&self.rho_im);
        v.extend_from_slice(&self.theta_flat);
        v.extend_from_slice(&self.prev_action);
        v.extend(self.target_angle);
        v
    }
}

/// Decodes a raw action (logits).
pub fn decode_action(raw: &[f64], cfg: &EnvConfig) -> Result<(Precoder, AntennaPositions)> {
    decode_activated(&cfg.layout().activate(raw)?, cfg)
}

/// Decodes an activated action `[tanh phases | power fractions | sigmoid displacements]`.
///
/// Column `j` of `F` is `sqrt(P q_j / N) exp(j π t_{·j})`, so `tr(F F^H) = P`.
/// Displacements are `Δ_n = Δ_max · mean(s) · w_n` with `w` the normalized odds
/// `s_n / (1 - s_n)`, which equals the softmax of the underlying logits.
pub fn decode_activated(act: &[f64], cfg: &EnvConfig) -> Result<(Precoder, AntennaPositions)> {
    let layout = cfg.layout();
    layout.check(act.len())?;
    let (n, k, streams) = (layout.n_elements, layout.n_users, layout.streams());

    let phases = &act[layout.phase_range()];
    let mut q: Vec<f64> = act[layout.power_range()].to_vec();
    if !cfg.sensing_streams {
        let comm: f64 = q[..k].iter().sum();
        for (j, v) in q.iter_mut().enumerate() {
            *v = if j < k { *v / comm } else { 0.0 };
        }
    }
    let f = Array2::from_shape_fn((n, streams), |(row, col)| {
        Complex64::from_polar((cfg.p_sum * q[col] / n as f64).sqrt(), PI * phases[col * n + row])
    });
    let precoder = Precoder::new(f, k, cfg.p_sum)?;

    let positions = if cfg.freeze_positions {
        compact_array(&cfg.array)
    } else {
        let s = &act[layout.displacement_range()];
        let odds: Vec<f64> = s
            .iter()
            .map(|v| {
                let v = v.clamp(ODDS_CLAMP, 1.0 - ODDS_CLAMP);
                v / (1.0 - v)
            })
            .collect();
        let total_odds: f64 = odds.iter().sum();
        let spend = cfg.array.max_displacement() * s.iter().sum::<f64>() / n as f64;
        let delta = odds.iter().map(|o| spend * o / total_odds).collect();
        displacements_to_positions(&DisplacementVector::new(delta), &cfg.array)?
    };
    Ok((precoder, positions))
}

/// Metrics of one decoded action on one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Schur-complement core `ġ^H R ġ - |g^H R ġ|² / g^H R g`.
    pub core: f64,
    /// `υ Σ min(0, γ_k - Γ_k)`, never positive.
    pub penalty: f64,
    /// `reward_scale · (core + penalty)`.
    pub reward: f64,
    /// Infinite when the precoder leaves the angle unidentifiable (zero core).
    pub crb: f64,
    /// Linear SINR per user.
    pub sinr: Vec<f64>,
}

impl Evaluation {
    pub fn crb_db(&self) -> Result<f64> {
        crb_db(self.crb)
    }

    pub fn min_sinr_db(&self) -> f64 {
        self.sinr.iter().map(|s| linear_to_db(*s)).fold(f64::INFINITY, f64::min)
    }

    pub fn feasible(&self) -> bool {
        self.penalty == 0.0
    }
}

/// Scores `(F, p)` on `scenario` with the coupling model `crosstalk`.
pub fn evaluate(
    f: &Precoder,
    p: &AntennaPositions,
    scenario: &Scenario,
    crosstalk: &CrosstalkParams,
    cfg: &EnvConfig,
) -> Result<Evaluation> {
    let wavelength = cfg.array.wavelength;
    let c = coupling_matrix(p, crosstalk)?;
    let (g, g_dot) = effective_sensing_channel(p, &c, scenario.theta_s, wavelength);
    // rounding can push the core of a rank-one precoder slightly negative
    let core = SensingForms::new(&g, &g_dot, f).schur_core()?.max(0.0);
    let crb = crb_from_core(core, scenario.alpha_s, scenario.sigma2_n(), scenario.n_samples).unwrap_or(f64::INFINITY);
    let sinr: Vec<f64> = scenario
        .users
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let h: Array1<Complex64> = user_channel(p, spec, wavelength);
            sinr(&h, &c, f.matrix().view(), k, scenario.sigma2_k[k])
        })
        .collect();
    let penalty = cfg.upsilon * sinr.iter().zip(&cfg.gamma_k).map(|(s, g)| (s - g).min(0.0)).sum::<f64>();
    Ok(Evaluation {
        core,
        penalty,
        reward: cfg.reward_scale * (core + penalty),
        crb,
        sinr,
    })
}

/// Reward of a decoded action under the environment's own coupling model.
pub fn reward(f: &Precoder, p: &AntennaPositions, scenario: &Scenario, cfg: &EnvConfig) -> Result<f64> {
    Ok(evaluate(f, p, scenario, &cfg.crosstalk, cfg)?.reward)
}

/// Result of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    pub evaluation: Evaluation,
}

/// Pure transition function; the scenario stays fixed within an episode.
pub fn step(state: &EnvState, raw: &[f64], scenario: &Scenario, cfg: &EnvConfig, t: usize) -> Result<StepOutcome> {
    if t >= cfg.steps_per_episode {
        return Err(IsacError::Protocol(format!(
            "step {t} requested but the episode ended after {} steps",
            cfg.steps_per_episode
        )));
    }
    let activated = cfg.layout().activate(raw)?;
    let (f, p) = decode_activated(&activated, cfg)?;
    let evaluation = evaluate(&f, &p, scenario, &cfg.crosstalk, cfg)?;
    let next = EnvState {
        // bounded form of the action keeps greedy rollouts from feeding back unbounded logits
        prev_action: activated,
        ..state.clone()
    };
    Ok(StepOutcome {
        next,
        reward: evaluation.reward,
        done: t + 1 == cfg.steps_per_episode,
        evaluation,
    })
}

/// Samples a fresh scenario from `seed` and builds the initial state.
pub fn reset(seed: u64, cfg: &EnvConfig) -> (EnvState, Scenario) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = sample_scenario(&mut rng, &cfg.scenario);
    (initial_state(&scenario, cfg), scenario)
}

/// State at the start of an episode on a given scenario.
pub fn initial_state(scenario: &Scenario, cfg: &EnvConfig) -> EnvState {
    EnvState::from_scenario(scenario, cfg, vec![0.0; cfg.layout().dim()])
}

/// Stateful wrapper that tracks the step index of one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scenario: Scenario,
    pub state: EnvState,
    pub t: usize,
    cfg: EnvConfig,
}

impl Episode {
    pub fn new(scenario: Scenario, cfg: &EnvConfig) -> Self {
        Self {
            state: initial_state(&scenario, cfg),
            scenario,
            t: 0,
            cfg: cfg.clone(),
        }
    }

    pub fn from_seed(seed: u64, cfg: &EnvConfig) -> Self {
        let (_, scenario) = reset(seed, cfg);
        Self::new(scenario, cfg)
    }

    pub fn finished(&self) -> bool {
        self.t >= self.cfg.steps_per_episode
    }

    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome> {
        let out = step(&self.state, raw, &self.scenario, &self.cfg, self.t)?;
        self.state = out.next.clone();
        self.t += 1;
        Ok(out)
    }
}

/// One row of an episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub reward: f64,
    pub penalty: f64,
    pub crb_db: f64,
    pub sinr_db: Vec<f64>,
}

impl TraceRow {
    pub fn new(step: usize, e: &Evaluation) -> Result<Self> {
        Ok(Self {
            step,
            reward: e.reward,
            penalty: e.penalty,
            crb_db: e.crb_db()?,
            sinr_db: e.sinr.iter().map(|s| linear_to_db(*s)).collect(),
        })
    }
}

/// Writes `step,reward,penalty,crb_db,sinr_db_1..sinr_db_K`.
pub fn write_trace<W: Write>(rows: &[TraceRow], n_users: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "reward".into(), "penalty".into(), "crb_db".into()];
    header.extend((1..=n_users).map(|k| format!("sinr_db_{k}")));
    w.write_record(&header)?;
    for r in rows {
        if r.sinr_db.len() != n_users {
            return Err(IsacError::Dimension {
                what: "trace SINR columns",
                expected: n_users,
                got: r.sinr_db.len(),
            });
        }
        let mut rec = vec![r.step.to_string(), r.reward.to_string(), r.penalty.to_string(), r.crb_db.to_string()];
        rec.extend(r.sinr_db.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
