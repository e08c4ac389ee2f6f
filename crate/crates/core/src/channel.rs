//! Multipath user channels, the inter-antenna crosstalk model and the
//! crosstalk-involved sensing channel.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::array::{steering_derivative, steering_vector, AntennaPositions};
use crate::error::{IsacError, Result};

/// Self-coupling used on the diagonal of the coupling matrix.
pub const SELF_COUPLING: f64 = 1.0;

/// Parameters of the linear-phase power-series coupling model
/// `c_mn = eta * d^-iota * exp(-j (nu d + xi))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkParams {
    pub eta: f64,
    pub iota: f64,
    /// Radians per meter.
    pub nu: f64,
    /// Radians.
    pub xi: f64,
    pub enabled: bool,
}

impl Default for CrosstalkParams {
    fn default() -> Self {
        Self {
            eta: 3.5e-5,
            iota: 1.9,
            nu: 600.4,
            xi: 252.8,
            enabled: true,
        }
    }
}

impl CrosstalkParams {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !(self.iota > 0.0) {
            return Err(IsacError::Config(format!(
                "crosstalk needs eta >= 0 and iota > 0 (got eta={}, iota={})",
                self.eta, self.iota
            )));
        }
        Ok(())
    }

    /// Coupling coefficient for separation `d` (meters).
    pub fn coefficient(&self, d: f64) -> Complex64 {
        Complex64::from_polar(self.eta * d.powf(-self.iota), -(self.nu * d + self.xi))
    }
}

/// N×N complex crosstalk matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix(Array2<Complex64>);

impl CouplingMatrix {
    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn from_matrix(c: Array2<Complex64>) -> Self {
        Self(c)
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    /// `C^H x`.
    pub fn hermitian_apply(&self, x: &Array1<Complex64>) -> Array1<Complex64> {
        let n = self.size();
        let mut out = Array1::zeros(n);
        for col in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for row in 0..n {
                acc += self.0[[row, col]].conj() * x[row];
            }
            out[col] = acc;
        }
        out
    }
}

/// Builds `C(p)` with unit self-coupling; identity when crosstalk is disabled.
pub fn coupling_matrix(p: &AntennaPositions, params: &CrosstalkParams) -> Result<CouplingMatrix> {
    coupling_matrix_with_diagonal(p, params, SELF_COUPLING)
}

pub fn coupling_matrix_with_diagonal(
    p: &AntennaPositions,
    params: &CrosstalkParams,
    diagonal: f64,
) -> Result<CouplingMatrix> {
    let n = p.len();
    if !params.enabled {
        return Ok(CouplingMatrix::identity(n));
    }
    let pos = p.as_slice();
    let mut c = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
    for m in 0..n {
        c[[m, m]] = Complex64::new(diagonal, 0.0);
        for k in (m + 1)..n {
            let d = (pos[m] - pos[k]).abs();
            if d == 0.0 {
                return Err(IsacError::Geometry(format!("antennas {m} and {k} coincide at {}", pos[m])));
            }
            let v = params.coefficient(d);
            c[[m, k]] = v;
            c[[k, m]] = v;
        }
    }
    Ok(CouplingMatrix(c))
}

/// Path gains and angles of departure of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserChannelSpec {
    pub gains: Vec<Complex64>,
    pub angles: Vec<f64>,
}

impl UserChannelSpec {
    pub fn n_paths(&self) -> usize {
        self.gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gains.len() != self.angles.len() || self.gains.is_empty() {
            return Err(IsacError::Dimension {
                what: "user path angles",
                expected: self.gains.len(),
                got: self.angles.len(),
            });
        }
        if let Some(a) = self.angles.iter().find(|a| !(0.0..=PI).contains(*a)) {
            return Err(IsacError::Domain(format!("angle of departure {a} outside [0, π]")));
        }
        Ok(())
    }
}

/// `h_k = sqrt(N / L_p) Σ_l ρ_l a(θ_l)`.
pub fn user_channel(p: &AntennaPositions, spec: &UserChannelSpec, wavelength: f64) -> Array1<Complex64> {
    let n = p.len();
    let scale = (n as f64 / spec.n_paths() as f64).sqrt();
    let mut h = Array1::from_elem(n, Complex64::new(0.0, 0.0));
    for (&rho, &theta) in spec.gains.iter().zip(&spec.angles) {
        h.scaled_add(rho * scale, &steering_vector(p, theta, wavelength));
    }
    h
}

/// `(g, ġ) = (C^H a_s, C^H ∂a_s/∂θ_s)`.
pub fn effective_sensing_channel(
    p: &AntennaPositions,
    c: &CouplingMatrix,
    theta_s: f64,
    wavelength: f64,
) -> (Array1<Complex64>, Array1<Complex64>) {
    let a = steering_vector(p, theta_s, wavelength);
    let da = steering_derivative(p, theta_s, wavelength);
    (c.hermitian_apply(&a), c.hermitian_apply(&da))
}

/// Everything that is held fixed while a scenario is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub n_users: usize,
    pub n_paths: usize,
    pub theta_s: f64,
    pub alpha_s: Complex64,
    pub sigma2_s: f64,
    pub sigma2_c: f64,
    /// Common noise power of every user.
    pub sigma2_user: f64,
    pub crosstalk: CrosstalkParams,
    pub n_samples: usize,
}

/// One random channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub users: Vec<UserChannelSpec>,
    pub theta_s: f64,
    pub alpha_s: Complex64,
    pub sigma2_s: f64,
    pub sigma2_c: f64,
    pub sigma2_k: Vec<f64>,
    pub crosstalk: CrosstalkParams,
    pub n_samples: usize,
}

impl Scenario {
    /// Effective sensing noise `σ_s² + σ_c²` (clutter absorbed as noise).
    pub fn sigma2_n(&self) -> f64 {
        self.sigma2_s + self.sigma2_c
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(IsacError::Config("frame length must be at least 1".into()));
        }
        if !(self.sigma2_s > 0.0) || self.sigma2_c < 0.0 || self.sigma2_k.iter().any(|s| !(*s > 0.0)) {
            return Err(IsacError::Config("noise powers must be positive".into()));
        }
        if self.sigma2_k.len() != self.users.len() {
            return Err(IsacError::Dimension {
                what: "user noise powers",
                expected: self.users.len(),
                got: self.sigma2_k.len(),
            });
        }
        self.crosstalk.validate()?;
        self.users.iter().try_for_each(UserChannelSpec::validate)
    }

    /// Same realization with every noise power replaced by `noise`.
    pub fn with_noise(&self, noise: f64) -> Scenario {
        Scenario {
            sigma2_s: noise,
            sigma2_k: vec![noise; self.users.len()],
            ..self.clone()
        }
    }

    pub fn with_crosstalk(&self, crosstalk: CrosstalkParams) -> Scenario {
        Scenario {
            crosstalk,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScenarioRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Scenario> {
        let rec: ScenarioRecord = serde_json::from_str(text)?;
        let s = Scenario::from(rec);
        s.validate()?;
        Ok(s)
    }
}

/// Draws `ρ ~ CN(0, 1)`, `θ ~ U(0, π)` for every user path.
pub fn sample_scenario<R: Rng + ?Sized>(rng: &mut R, params: &ScenarioParams) -> Scenario {
    let users = (0..params.n_users)
        .map(|_| {
            let gains = (0..params.n_paths).map(|_| sample_cn(rng, 1.0)).collect();
            let angles = (0..params.n_paths).map(|_| rng.random::<f64>() * PI).collect();
            UserChannelSpec { gains, angles }
        })
        .collect();
    Scenario {
        users,
        theta_s: params.theta_s,
        alpha_s: params.alpha_s,
        sigma2_s: params.sigma2_s,
        sigma2_c: params.sigma2_c,
        sigma2_k: vec![params.sigma2_user; params.n_users],
        crosstalk: params.crosstalk,
        n_samples: params.n_samples,
    }
}

/// Circularly-symmetric complex Gaussian with the given variance.
pub fn sample_cn<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

#[derive(Serialize, Deserialize)]
struct UserRecord {
    gains: Vec<[f64; 2]>,
    angles_rad: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioRecord {
    users: Vec<UserRecord>,
    theta_s_rad: f64,
    alpha_s: [f64; 2],
    sigma2_s: f64,
    sigma2_c: f64,
    sigma2_k: Vec<f64>,
    crosstalk: CrosstalkParams,
    n_samples: usize,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        ScenarioRecord {
            users: s
                .users
                .iter()
                .map(|u| UserRecord {
                    gains: u.gains.iter().map(|g| [g.re, g.im]).collect(),
                    angles_rad: u.angles.clone(),
                })
                .collect(),
            theta_s_rad: s.theta_s,
            alpha_s: [s.alpha_s.re, s.alpha_s.im],
            sigma2_s: s.sigma2_s,
            sigma2_c: s.sigma2_c,
            sigma2_k: s.sigma2_k.clone(),
            crosstalk: s.crosstalk,
            n_samples: s.n_samples,
        }
    }
}

impl From<ScenarioRecord> for Scenario {
    fn from(r: ScenarioRecord) -> Self {
        Scenario {
            users: r
                .users
                .into_iter()
                .map(|u| UserChannelSpec {
                    gains: u.gains.iter().map(|g| Complex64::new(g[0], g[1])).collect(),
                    angles: u.angles_rad,
                })
                .collect(),
            theta_s: r.theta_s_rad,
            alpha_s: Complex64::new(r.alpha_s[0], r.alpha_s[1]),
            sigma2_s: r.sigma2_s,
            sigma2_c: r.sigma2_c,
            sigma2_k: r.sigma2_k,
            crosstalk: r.crosstalk,
            n_samples: r.n_samples,
        }
    }
}
