//! Communication SINR and the angle-estimation Cramér-Rao bound.
//!
//! Every sensing quantity is expressed through the two projections
//! `u = F^H g` and `v = F^H ġ`, so that
//! `g^H F F^H g = ‖u‖²`, `ġ^H F F^H ġ = ‖v‖²` and `g^H F F^H ġ = u^H v`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_cn, CouplingMatrix};
use crate::error::{IsacError, Result};

/// Floor below which the CRB denominator is treated as zero information.
pub const CRB_DENOMINATOR_FLOOR: f64 = 1e-300;

/// Slack on the total transmit power constraint.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Joint precoder `F = [F_c | F_s]` (N×K communication columns followed by sensing columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    f: Array2<Complex64>,
    n_users: usize,
    p_sum: f64,
}

impl Precoder {
    pub fn new(f: Array2<Complex64>, n_users: usize, p_sum: f64) -> Result<Self> {
        if n_users > f.ncols() {
            return Err(IsacError::Dimension {
                what: "precoder columns",
                expected: n_users,
                got: f.ncols(),
            });
        }
        let out = Self { f, n_users, p_sum };
        out.check_power()?;
        Ok(out)
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.f
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn p_sum(&self) -> f64 {
        self.p_sum
    }

    pub fn comm(&self) -> ArrayView2<'_, Complex64> {
        self.f.slice(ndarray::s![.., ..self.n_users])
    }

    pub fn sensing(&self) -> ArrayView2<'_, Complex64> {
        self.f.slice(ndarray::s![.., self.n_users..])
    }

    /// `tr(F F^H)`.
    pub fn power(&self) -> f64 {
        self.f.iter().map(|x| x.norm_sqr()).sum()
    }

    pub fn check_power(&self) -> Result<()> {
        let p = self.power();
        if !(p <= self.p_sum + POWER_TOLERANCE) {
            return Err(IsacError::ConstraintViolation {
                component: 0,
                reason: format!("transmit power {p} exceeds budget {}", self.p_sum),
            });
        }
        Ok(())
    }

    /// Right-multiplies by `u`, keeping the user partition and budget.
    pub fn transformed(&self, u: &Array2<Complex64>) -> Result<Precoder> {
        Precoder::new(self.f.dot(u), self.n_users, self.p_sum)
    }
}

/// Real symmetric FIM over `[θ_s, Re α_s, Im α_s]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherMatrix(pub [[f64; 3]; 3]);

impl FisherMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i][j]
    }
}

/// `F^H x`.
fn project(f: ArrayView2<'_, Complex64>, x: ArrayView1<'_, Complex64>) -> Array1<Complex64> {
    f.axis_iter(Axis(1))
        .map(|col| col.iter().zip(x.iter()).map(|(a, b)| a.conj() * b).sum())
        .collect()
}

fn dot_h(a: &Array1<Complex64>, b: &Array1<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

fn norm_sqr(a: &Array1<Complex64>) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

/// The three quadratic forms entering the sensing metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingForms {
    /// `g^H F F^H g`
    pub gg: f64,
    /// `ġ^H F F^H ġ`
    pub dd: f64,
    /// `ġ^H F F^H g`
    pub dg: Complex64,
}

impl SensingForms {
    pub fn new(g: &Array1<Complex64>, g_dot: &Array1<Complex64>, f: &Precoder) -> Self {
        let u = project(f.matrix().view(), g.view());
        let v = project(f.matrix().view(), g_dot.view());
        Self {
            gg: norm_sqr(&u),
            dd: norm_sqr(&v),
            dg: dot_h(&v, &u),
        }
    }

    /// Schur-complement core `ġ^H R ġ - |g^H R ġ|² / g^H R g`.
    pub fn schur_core(&self) -> Result<f64> {
        if !(self.gg > CRB_DENOMINATOR_FLOOR) {
            return Err(IsacError::Unobservable(format!(
                "no power toward the target (g^H F F^H g = {:e})",
                self.gg
            )));
        }
        Ok(self.dd - self.dg.norm_sqr() / self.gg)
    }
}

/// Closed-form SINR of user `k`; every other column of `f` interferes.
pub fn sinr(h_k: &Array1<Complex64>, c: &CouplingMatrix, f: ArrayView2<'_, Complex64>, k: usize, sigma2_k: f64) -> f64 {
    // h^H C f_j = (C^H h)^H f_j
    let eff = c.hermitian_apply(h_k);
    let gains = project(f, eff.view());
    let signal = gains[k].norm_sqr();
    let interference: f64 = gains
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, x)| x.norm_sqr())
        .sum();
    signal / (interference + sigma2_k)
}

/// Assembled FIM for the Gaussian echo model `y ~ CN(α* S^H F^H g, σ² I_L)`.
pub fn fisher_matrix(
    g: &Array1<Complex64>,
    g_dot: &Array1<Complex64>,
    f: &Precoder,
    alpha_s: Complex64,
    sigma2_n: f64,
    n_samples: usize,
) -> FisherMatrix {
    let forms = SensingForms::new(g, g_dot, f);
    let scale = 2.0 * n_samples as f64 / sigma2_n;
    let m_tt = scale * alpha_s.norm_sqr() * forms.dd;
    // ∂ȳ/∂Re α = S^H F^H g and ∂ȳ/∂Im α = -j S^H F^H g, since ȳ depends on α*.
    let cross = alpha_s * forms.dg;
    let m_tr = scale * cross.re;
    let m_ti = scale * (Complex64::new(0.0, -1.0) * cross).re;
    let m_aa = scale * forms.gg;
    FisherMatrix([[m_tt, m_tr, m_ti], [m_tr, m_aa, 0.0], [m_ti, 0.0, m_aa]])
}

/// Closed-form CRB of the target angle.
pub fn crb_theta(
    g: &Array1<Complex64>,
    g_dot: &Array1<Complex64>,
    f: &Precoder,
    alpha_s: Complex64,
    sigma2_n: f64,
    n_samples: usize,
) -> Result<f64> {
    let core = SensingForms::new(g, g_dot, f).schur_core()?;
    crb_from_core(core, alpha_s, sigma2_n, n_samples)
}

/// `σ² / (2 L |α|² core)`.
pub fn crb_from_core(core: f64, alpha_s: Complex64, sigma2_n: f64, n_samples: usize) -> Result<f64> {
    let denom = 2.0 * n_samples as f64 * alpha_s.norm_sqr() * core;
    if !(denom > CRB_DENOMINATOR_FLOOR) {
        return Err(IsacError::Unobservable(format!(
            "Schur-complement denominator {denom:e} is not positive"
        )));
    }
    Ok(sigma2_n / denom)
}

pub fn crb_db(crb: f64) -> Result<f64> {
    if !(crb > 0.0) {
        return Err(IsacError::Domain(format!("CRB must be positive to express in dB, got {crb}")));
    }
    Ok(10.0 * crb.log10())
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Monte-Carlo SINR from the per-symbol signal model.
///
/// Symbols and noise are i.i.d. unit-variance (resp. `σ_k²`) circular
/// Gaussians. Each antenna output mixes all branches as `x_n = Σ_m c_mn u_m`;
/// the desired part of `y_k` is isolated by re-running the chain with only
/// stream `k` active.
pub fn sinr_monte_carlo<R: Rng + ?Sized>(
    h_k: &Array1<Complex64>,
    c: &CouplingMatrix,
    f: ArrayView2<'_, Complex64>,
    k: usize,
    sigma2_k: f64,
    n_symbols: usize,
    rng: &mut R,
) -> f64 {
    let n = f.nrows();
    let streams = f.ncols();
    let cm = c.matrix();
    let mut desired_energy = 0.0;
    let mut residual_energy = 0.0;
    let mut s = vec![Complex64::new(0.0, 0.0); streams];
    let mut u = vec![Complex64::new(0.0, 0.0); n];
    let mut u_k = vec![Complex64::new(0.0, 0.0); n];
    for _ in 0..n_symbols {
        for x in s.iter_mut() {
            *x = sample_cn(rng, 1.0);
        }
        let noise = sample_cn(rng, sigma2_k);
        for m in 0..n {
            u[m] = (0..streams).map(|j| f[[m, j]] * s[j]).sum();
            u_k[m] = f[[m, k]] * s[k];
        }
        let mut y = noise;
        let mut y_desired = Complex64::new(0.0, 0.0);
        for out in 0..n {
            let mut x = Complex64::new(0.0, 0.0);
            let mut x_k = Complex64::new(0.0, 0.0);
            for m in 0..n {
                x += cm[[m, out]] * u[m];
                x_k += cm[[m, out]] * u_k[m];
            }
            y += h_k[out].conj() * x;
            y_desired += h_k[out].conj() * x_k;
        }
        desired_energy += y_desired.norm_sqr();
        residual_energy += (y - y_desired).norm_sqr();
    }
    desired_energy / residual_energy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{steering_derivative, steering_vector, AntennaPositions};
    use crate::channel::{coupling_matrix, effective_sensing_channel, CrosstalkParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((rows, cols), |_| sample_cn(rng, 1.0))
    }

    fn random_precoder(rng: &mut ChaCha8Rng, n: usize, k: usize, p_sum: f64) -> Precoder {
        let f = random_matrix(rng, n, k + n);
        let scale = (p_sum / f.iter().map(|x| x.norm_sqr()).sum::<f64>()).sqrt();
        Precoder::new(f.mapv(|x| x * scale), k, p_sum).unwrap()
    }

    fn instance(rng: &mut ChaCha8Rng, n: usize) -> (Array1<Complex64>, Array1<Complex64>) {
        let p = AntennaPositions::new((0..n).map(|i| i as f64 * 0.006 + rng.random::<f64>() * 0.002).collect());
        let c = coupling_matrix(&p, &CrosstalkParams::default()).unwrap();
        effective_sensing_channel(&p, &c, 1.0 + rng.random::<f64>(), 0.01)
    }

    #[test]
    fn single_user_sinr_has_no_interference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Array1::from_shape_fn(4, |_| sample_cn(&mut rng, 1.0));
        let f = random_matrix(&mut rng, 4, 1);
        let c = CouplingMatrix::identity(4);
        let expected = dot_h(&h, &f.column(0).to_owned()).norm_sqr() / 0.3;
        assert!((sinr(&h, &c, f.view(), 0, 0.3) - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn silent_user_has_zero_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Array1::from_shape_fn(4, |_| sample_cn(&mut rng, 1.0));
        let mut f = random_matrix(&mut rng, 4, 3);
        f.column_mut(1).fill(Complex64::new(0.0, 0.0));
        assert_eq!(sinr(&h, &CouplingMatrix::identity(4), f.view(), 1, 0.1), 0.0);
        assert!(sinr(&h, &CouplingMatrix::identity(4), f.view(), 0, 0.1) > 0.0);
    }

    #[test]
    fn sinr_recomputes_consistently_under_channel_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Array1::from_shape_fn(5, |_| sample_cn(&mut rng, 1.0));
        let f = random_matrix(&mut rng, 5, 3);
        let c = coupling_matrix(
            &AntennaPositions::new(vec![0.0, 0.006, 0.013, 0.02, 0.031]),
            &CrosstalkParams::default(),
        )
        .unwrap();
        let s = Complex64::new(1.3, -0.4);
        let base = sinr(&h, &c, f.view(), 1, 0.2);
        // scaling h by s and every column by 1/s leaves each |h^H C f_j|² unchanged
        let h2 = h.mapv(|x| x * s);
        let f2 = f.mapv(|x| x / s.conj());
        let again = sinr(&h2, &c, f2.view(), 1, 0.2);
        assert!((base - again).abs() < 1e-12 * base);
    }

    #[test]
    fn zero_derivative_kills_angle_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, _) = instance(&mut rng, 6);
        let f = random_precoder(&mut rng, 6, 2, 1.0);
        let m = fisher_matrix(&g, &Array1::zeros(6), &f, Complex64::new(0.4, 0.1), 0.01, 64);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(0, 2), 0.0);
        assert!(m.get(1, 1) > 0.0);
    }

    #[test]
    fn real_cross_term_has_no_imaginary_coupling() {
        // broadside steering with a real precoder makes ġ^H F F^H g purely real
        let p = AntennaPositions::new(vec![0.0, 0.01, 0.02]);
        let g = steering_vector(&p, PI / 2.0, 0.01);
        let gd = steering_derivative(&p, PI / 2.0, 0.01).mapv(|x| x * Complex64::new(0.0, 1.0));
        let f = Array2::from_shape_fn((3, 4), |(i, j)| Complex64::new(((i + 2 * j) as f64).cos(), 0.0));
        let f = Precoder::new(f, 1, 100.0).unwrap();
        let forms = SensingForms::new(&g, &gd, &f);
        assert!(forms.dg.im.abs() < 1e-12);
        let m = fisher_matrix(&g, &gd, &f, Complex64::new(0.4, 0.0), 0.5, 10);
        let scale = 2.0 * 10.0 / 0.5;
        assert!((m.get(0, 1) - scale * 0.4 * forms.dg.re).abs() < 1e-12 * m.get(0, 1).abs().max(1.0));
        assert!(m.get(0, 2).abs() < 1e-12);
    }

    #[test]
    fn crb_is_linear_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, gd) = instance(&mut rng, 8);
        let f = random_precoder(&mut rng, 8, 2, 0.01);
        let a = Complex64::new(0.4, 0.0);
        let base = crb_theta(&g, &gd, &f, a, 1e-3, 128).unwrap();
        for s in [0.1, 3.0, 17.0] {
            let scaled = crb_theta(&g, &gd, &f, a, 1e-3 * s, 128).unwrap();
            assert!((scaled / base - s).abs() < 1e-12 * s);
        }
    }

    #[test]
    fn crb_invariant_under_unitary_right_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, gd) = instance(&mut rng, 4);
        let f = random_precoder(&mut rng, 4, 2, 1.0);
        // unitary from a product of a diagonal phase and a DFT
        let m = 6;
        let u = Array2::from_shape_fn((m, m), |(i, j)| {
            Complex64::from_polar(1.0 / (m as f64).sqrt(), -2.0 * PI * (i * j) as f64 / m as f64 + 0.3 * i as f64)
        });
        let fu = f.transformed(&u).unwrap();
        let a = Complex64::new(0.3, -0.2);
        let c1 = crb_theta(&g, &gd, &f, a, 0.01, 32).unwrap();
        let c2 = crb_theta(&g, &gd, &fu, a, 0.01, 32).unwrap();
        assert!((c1 - c2).abs() < 1e-10 * c1);
    }

    #[test]
    fn cauchy_schwarz_keeps_core_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (g, gd) = instance(&mut rng, 6);
            let f = random_precoder(&mut rng, 6, 1, 1.0);
            let forms = SensingForms::new(&g, &gd, &f);
            assert!(forms.dd * forms.gg >= forms.dg.norm_sqr() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn rank_one_precoder_is_unobservable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (g, gd) = instance(&mut rng, 4);
        let col = random_matrix(&mut rng, 4, 1);
        let f = Precoder::new(col, 1, 100.0).unwrap();
        let r = crb_theta(&g, &gd, &f, Complex64::new(0.4, 0.0), 1.0, 10);
        let core = SensingForms::new(&g, &gd, &f).schur_core().unwrap();
        assert!(core.abs() < 1e-10 * SensingForms::new(&g, &gd, &f).dd);
        if let Ok(v) = r {
            assert!(v > 1e6);
        }
        let zero = Precoder::new(Array2::zeros((4, 3)), 1, 1.0).unwrap();
        assert!(matches!(
            crb_theta(&g, &gd, &zero, Complex64::new(0.4, 0.0), 1.0, 10),
            Err(IsacError::Unobservable(_))
        ));
    }

    #[test]
    fn db_conversion() {
        assert_eq!(crb_db(1.0).unwrap(), 0.0);
        assert!((crb_db(1e-7).unwrap() + 70.0).abs() < 1e-12);
        assert!((crb_db(4.17e-7).unwrap() + 63.8).abs() < 0.01);
        assert!(matches!(crb_db(0.0), Err(IsacError::Domain(_))));
        assert!(matches!(crb_db(-1.0), Err(IsacError::Domain(_))));
    }

    #[test]
    fn crb_db_drops_one_db_per_db_of_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g, gd) = instance(&mut rng, 8);
        let f = random_precoder(&mut rng, 8, 2, 0.01);
        let a = Complex64::new(0.4, 0.0);
        let at = |noise_db: f64| crb_db(crb_theta(&g, &gd, &f, a, db_to_linear(noise_db), 128).unwrap()).unwrap();
        for db in [-40.0, -33.0, -20.5] {
            assert!(((at(db) - at(db - 1.0)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn power_budget_is_enforced() {
        let f = Array2::from_elem((2, 3), Complex64::new(1.0, 0.0));
        assert!(Precoder::new(f.clone(), 1, 6.0).is_ok());
        assert!(Precoder::new(f, 1, 5.9).is_err());
    }
}
