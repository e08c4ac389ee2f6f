//! Oracle checks of the analytic layer, runnable outside the test harness.
//!
//! Every check draws its instances from a fixed seed and reports the worst
//! error it saw against its tolerance.

use std::fmt;
use std::time::Instant;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{steering_derivative, AntennaPositions};
use crate::channel::{coupling_matrix, effective_sensing_channel, sample_cn, user_channel, CrosstalkParams, UserChannelSpec};
use crate::env::{decode_action, EnvConfig};
use crate::error::Result;
use crate::metrics::{crb_db, crb_theta, fisher_matrix, sinr, sinr_monte_carlo, Precoder};
use crate::nn::{Activation, DenseNetwork, LayerActivation, Segment};
use crate::oracles::{
    fd_effective_derivative, fd_steering_derivative, fim_entrywise_error, invert3, orthogonal_pilots, relative_error,
    EchoModel,
};

const WAVELENGTH: f64 = 0.01;

/// Result of one oracle check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    /// Largest error observed, in the check's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub elapsed_s: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst.abs() < self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (tolerance {:.1e}, {} instances, {:.2} s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances,
            self.elapsed_s
        )
    }
}

fn timed(name: &'static str, instances: usize, tolerance: f64, body: impl FnOnce() -> Result<f64>) -> Result<CheckOutcome> {
    let start = Instant::now();
    let worst = body()?;
    Ok(CheckOutcome {
        name,
        instances,
        worst,
        tolerance,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Sorted positions with gaps in `[λ/2, 3λ/2)`.
fn random_positions(rng: &mut ChaCha8Rng, n: usize) -> AntennaPositions {
    let mut p = 0.0;
    AntennaPositions::new(
        (0..n)
            .map(|i| {
                if i > 0 {
                    p += WAVELENGTH * (0.5 + rng.random::<f64>());
                }
                p
            })
            .collect(),
    )
}

/// Random precoder with `streams` columns using the whole budget `p_sum`.
fn random_precoder(rng: &mut ChaCha8Rng, n: usize, k: usize, streams: usize, p_sum: f64) -> Result<Precoder> {
    let f = Array2::from_shape_fn((n, streams), |_| sample_cn(rng, 1.0));
    let scale = (p_sum / f.iter().map(|x| x.norm_sqr()).sum::<f64>()).sqrt();
    Precoder::new(f.mapv(|x| x * scale), k, p_sum)
}

/// Closed-form CRB against the (1,1) entry of the inverted FIM.
pub fn crb_matches_inverse_fim(instances: usize, seed: u64) -> Result<CheckOutcome> {
    timed("CRB equals inverse-FIM entry", instances, 1e-8, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let n = [4, 8, 16][i % 3];
            let k = [1, 2, 4][(i / 3) % 3];
            let p = random_positions(&mut rng, n);
            let c = coupling_matrix(&p, &CrosstalkParams::default())?;
            let theta = 0.2 + 2.7 * rng.random::<f64>();
            let (g, gd) = effective_sensing_channel(&p, &c, theta, WAVELENGTH);
            let f = random_precoder(&mut rng, n, k, k + n, 0.01)?;
            let alpha = sample_cn(&mut rng, 0.5);
            let sigma2 = 10f64.powf(-1.0 - 3.0 * rng.random::<f64>());
            let crb = crb_theta(&g, &gd, &f, alpha, sigma2, 128)?;
            let fim = fisher_matrix(&g, &gd, &f, alpha, sigma2, 128);
            let inv = invert3(&fim.0).ok_or_else(|| crate::IsacError::Unobservable("singular FIM".into()))?;
            worst = worst.max((crb - inv[0][0]).abs() / inv[0][0]);
        }
        Ok(worst)
    })
}

/// Closed-form FIM against the Hessian of the Gaussian likelihood with orthogonal pilots.
pub fn fim_matches_likelihood(instances: usize, seed: u64) -> Result<CheckOutcome> {
    timed("FIM equals likelihood Hessian", instances, 1e-4, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let n = [4, 6, 8][i % 3];
            let k = 1 + i % 2;
            let frame = 32;
            let p = random_positions(&mut rng, n);
            let c = coupling_matrix(&p, &CrosstalkParams::default())?;
            let f = random_precoder(&mut rng, n, k, k + n, 1.0)?;
            let theta = 0.3 + 2.5 * rng.random::<f64>();
            let alpha = sample_cn(&mut rng, 0.5);
            let sigma2 = 0.01 + 0.1 * rng.random::<f64>();
            let pilots = orthogonal_pilots(k + n, frame);
            let model = EchoModel {
                positions: &p,
                coupling: &c,
                precoder: &f,
                pilots: &pilots,
                wavelength: WAVELENGTH,
                sigma2_n: sigma2,
            };
            let numeric = model.likelihood_fim([theta, alpha.re, alpha.im], [1e-6, 1e-4, 1e-4]);
            let (g, gd) = effective_sensing_channel(&p, &c, theta, WAVELENGTH);
            let analytic = fisher_matrix(&g, &gd, &f, alpha, sigma2, frame);
            worst = worst.max(fim_entrywise_error(&analytic.0, &numeric));
        }
        Ok(worst)
    })
}

/// Analytic steering and effective-channel derivatives against central differences.
pub fn derivatives_match_differences(pairs: usize, seed: u64) -> Result<CheckOutcome> {
    timed("derivatives equal central differences", pairs, 1e-5, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for i in 0..pairs {
            let p = random_positions(&mut rng, [4, 8, 16][i % 3]);
            let theta = 0.1 + 2.9 * rng.random::<f64>();
            let fd = fd_steering_derivative(&p, theta, WAVELENGTH, 1e-6);
            worst = worst.max(relative_error(&steering_derivative(&p, theta, WAVELENGTH), &fd));
            let c = coupling_matrix(&p, &CrosstalkParams::default())?;
            let (_, gd) = effective_sensing_channel(&p, &c, theta, WAVELENGTH);
            worst = worst.max(relative_error(&gd, &fd_effective_derivative(&p, &c, theta, WAVELENGTH, 1e-6)));
        }
        Ok(worst)
    })
}

/// Closed-form SINR against a per-symbol simulation of the coupled transmit chain.
pub fn sinr_matches_monte_carlo(instances: usize, symbols: usize, seed: u64) -> Result<CheckOutcome> {
    timed("SINR equals Monte-Carlo estimate", instances, 0.015, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (n, k) = (8, 2);
            let p = random_positions(&mut rng, n);
            let c = coupling_matrix(&p, &CrosstalkParams::default())?;
            let spec = UserChannelSpec {
                gains: (0..2).map(|_| sample_cn(&mut rng, 1.0)).collect(),
                angles: (0..2).map(|_| rng.random::<f64>() * std::f64::consts::PI).collect(),
            };
            let h: Array1<Complex64> = user_channel(&p, &spec, WAVELENGTH);
            let f = random_precoder(&mut rng, n, k, k + n, 0.01)?;
            let user = rng.random_range(0..k);
            // noise comparable to the received interference keeps both terms visible
            let sigma2 = 1e-3 * (0.2 + rng.random::<f64>());
            let exact = sinr(&h, &c, f.matrix().view(), user, sigma2);
            let estimate = sinr_monte_carlo(&h, &c, f.matrix().view(), user, sigma2, symbols, &mut rng);
            worst = worst.max((estimate - exact).abs() / exact);
        }
        Ok(worst)
    })
}

/// Uniformly random raw actions always decode to feasible positions and full-budget precoders.
///
/// The reported metric counts violations plus the largest power error, so
/// any violation fails the check.
pub fn decoding_is_feasible(env: &EnvConfig, actions: usize, seed: u64) -> Result<CheckOutcome> {
    timed("random actions decode feasibly", actions, 1e-9, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = env.layout().dim();
        let mut violations = 0usize;
        let mut power_error: f64 = 0.0;
        for i in 0..actions {
            // alternate moderate and saturating logits
            let spread = if i % 2 == 0 { 1.0 } else { 30.0 };
            let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-spread..spread)).collect();
            let (f, p) = decode_action(&raw, env)?;
            if p.check(&env.array).is_err() {
                violations += 1;
            }
            power_error = power_error.max((f.power() - env.p_sum).abs());
        }
        Ok(violations as f64 + power_error)
    })
}

/// Deviation from -1 of the least-squares slope of CRB dB against SNR dB for a frozen design.
pub fn crb_snr_slope(env: &EnvConfig, seed: u64) -> Result<CheckOutcome> {
    timed("CRB dB slope against SNR dB", 1, 1e-9, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..env.layout().dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (f, p) = decode_action(&raw, env)?;
        let c = coupling_matrix(&p, &env.scenario.crosstalk)?;
        let (g, gd) = effective_sensing_channel(&p, &c, env.scenario.theta_s, env.array.wavelength);
        let grid: Vec<f64> = (0..=5).map(|i| 4.0 * i as f64).collect();
        let ys = grid
            .iter()
            .map(|snr| {
                let noise = env.p_sum / 10f64.powf(snr / 10.0);
                crb_db(crb_theta(&g, &gd, &f, env.scenario.alpha_s, noise, env.scenario.n_samples)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = grid.len() as f64;
        let (mx, my) = (grid.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = grid.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = grid.iter().map(|x| (x - mx).powi(2)).sum();
        Ok(sxy / sxx + 1.0)
    })
}

/// Relative error of backpropagated parameter and input gradients against central differences.
pub fn network_gradients_match_differences(seed: u64) -> Result<CheckOutcome> {
    let heads = [
        LayerActivation::Uniform(Activation::Identity),
        LayerActivation::Uniform(Activation::Relu),
        LayerActivation::Uniform(Activation::Tanh),
        LayerActivation::Uniform(Activation::Sigmoid),
        LayerActivation::Uniform(Activation::Softmax),
        LayerActivation::Segmented(vec![
            Segment { start: 0, len: 2, activation: Activation::Tanh },
            Segment { start: 2, len: 3, activation: Activation::Softmax },
            Segment { start: 5, len: 1, activation: Activation::Sigmoid },
        ]),
    ];
    let count = heads.len() * 2;
    timed("network gradients equal finite differences", count, 1e-4, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for head in heads {
            for hidden in [Activation::Tanh, Activation::Relu] {
                let net = DenseNetwork::mlp(&[4, 5, 6], hidden, head.clone(), None, &mut rng)?;
                worst = worst.max(gradient_error(&net, &mut rng)?);
            }
        }
        Ok(worst)
    })
}

/// Error of `backward` for the loss `Σ w ⊙ net(x)` over a batch of two inputs.
fn gradient_error(net: &DenseNetwork, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Array2::from_shape_fn((2, net.input_dim()), |_| rng.random_range(-1.0..1.0));
    let w = Array2::from_shape_fn((2, net.output_dim()), |_| rng.random_range(-1.0..1.0));
    let loss = |n: &DenseNetwork, x: &Array2<f64>| -> Result<f64> { Ok((n.forward_batch(x.view())? * &w).sum()) };
    let cache = net.forward_cached(x.view())?;
    let (grads, dx) = net.backward(&cache, &w);
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    let mut accumulate = |analytic: f64, numeric: f64| {
        diff += (analytic - numeric).powi(2);
        norm += numeric.powi(2);
    };
    for (l, grad) in grads.0.iter().enumerate() {
        for (idx, &analytic) in grad.weights.indexed_iter() {
            let mut plus = net.clone();
            plus.layers_mut()[l].weights[idx] += h;
            let mut minus = net.clone();
            minus.layers_mut()[l].weights[idx] -= h;
            accumulate(analytic, (loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * h));
        }
        for (idx, &analytic) in grad.bias.indexed_iter() {
            let mut plus = net.clone();
            plus.layers_mut()[l].bias[idx] += h;
            let mut minus = net.clone();
            minus.layers_mut()[l].bias[idx] -= h;
            accumulate(analytic, (loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * h));
        }
    }
    for (idx, &analytic) in dx.indexed_iter() {
        let mut plus = x.clone();
        plus[idx] += h;
        let mut minus = x.clone();
        minus[idx] -= h;
        accumulate(analytic, (loss(net, &plus)? - loss(net, &minus)?) / (2.0 * h));
    }
    Ok((diff / norm).sqrt())
}

/// All oracle checks at their acceptance sizes; `env` supplies the decoding and SNR-slope setting.
pub fn run_all(env: &EnvConfig, seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        crb_matches_inverse_fim(100, seed)?,
        fim_matches_likelihood(20, seed.wrapping_add(1))?,
        derivatives_match_differences(100, seed.wrapping_add(2))?,
        sinr_matches_monte_carlo(10, 100_000, seed.wrapping_add(3))?,
        decoding_is_feasible(env, 10_000, seed.wrapping_add(4))?,
        crb_snr_slope(env, seed.wrapping_add(5))?,
        network_gradients_match_differences(seed.wrapping_add(6))?,
    ])
}
