//! Independent reference computations used to cross-check the closed forms.
//!
//! Nothing here calls the analytic derivative or FIM code paths: derivatives
//! come from central differences of the forward model and the Fisher matrix
//! is the numerical Hessian of the expected Gaussian negative log-likelihood.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::array::{steering_vector, AntennaPositions};
use crate::channel::CouplingMatrix;
use crate::metrics::Precoder;

/// `(a(θ+h) - a(θ-h)) / 2h`.
pub fn fd_steering_derivative(p: &AntennaPositions, theta: f64, wavelength: f64, h: f64) -> Array1<Complex64> {
    let plus = steering_vector(p, theta + h, wavelength);
    let minus = steering_vector(p, theta - h, wavelength);
    (plus - minus).mapv(|x| x / (2.0 * h))
}

/// Central difference of `g(θ) = C^H a(θ)` computed by an explicit loop over `C`.
pub fn fd_effective_derivative(
    p: &AntennaPositions,
    c: &CouplingMatrix,
    theta: f64,
    wavelength: f64,
    h: f64,
) -> Array1<Complex64> {
    let g = |t: f64| explicit_effective_channel(p, c, t, wavelength);
    (g(theta + h) - g(theta - h)).mapv(|x| x / (2.0 * h))
}

fn explicit_effective_channel(p: &AntennaPositions, c: &CouplingMatrix, theta: f64, wavelength: f64) -> Array1<Complex64> {
    let a = steering_vector(p, theta, wavelength);
    let cm = c.matrix();
    let n = a.len();
    Array1::from_shape_fn(n, |col| (0..n).map(|row| cm[[row, col]].conj() * a[row]).sum())
}

/// Rows of a DFT matrix: `streams × frame` pilots with `S S^H = frame · I`.
///
/// Requires `streams <= frame`.
pub fn orthogonal_pilots(streams: usize, frame: usize) -> Array2<Complex64> {
    assert!(streams <= frame, "need at least as many samples as streams");
    Array2::from_shape_fn((streams, frame), |(i, l)| {
        Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (i * l) as f64 / frame as f64)
    })
}

/// Echo model shared by the likelihood oracle.
pub struct EchoModel<'a> {
    pub positions: &'a AntennaPositions,
    pub coupling: &'a CouplingMatrix,
    pub precoder: &'a Precoder,
    pub pilots: &'a Array2<Complex64>,
    pub wavelength: f64,
    pub sigma2_n: f64,
}

impl EchoModel<'_> {
    /// Noise-free echo `ȳ = α* S^H F^H C^H a(θ)` for `ψ = [θ, Re α, Im α]`.
    pub fn mean(&self, psi: [f64; 3]) -> Array1<Complex64> {
        let g = explicit_effective_channel(self.positions, self.coupling, psi[0], self.wavelength);
        let f = self.precoder.matrix();
        let fhg: Vec<Complex64> = (0..f.ncols())
            .map(|j| (0..f.nrows()).map(|n| f[[n, j]].conj() * g[n]).sum())
            .collect();
        let alpha_conj = Complex64::new(psi[1], -psi[2]);
        let s = self.pilots;
        Array1::from_shape_fn(s.ncols(), |l| {
            alpha_conj * (0..s.nrows()).map(|i| s[[i, l]].conj() * fhg[i]).sum::<Complex64>()
        })
    }

    /// Expected negative log-likelihood (up to a constant) at `psi` when the truth is `psi0`.
    fn divergence(&self, reference: &Array1<Complex64>, psi: [f64; 3]) -> f64 {
        let m = self.mean(psi);
        m.iter().zip(reference.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / self.sigma2_n
    }

    /// Numerical Hessian of the expected negative log-likelihood at the truth.
    pub fn likelihood_fim(&self, psi0: [f64; 3], steps: [f64; 3]) -> [[f64; 3]; 3] {
        let reference = self.mean(psi0);
        let eval = |di: f64, i: usize, dj: f64, j: usize| {
            let mut psi = psi0;
            psi[i] += di;
            psi[j] += dj;
            self.divergence(&reference, psi)
        };
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            let h = steps[i];
            let mut psi_p = psi0;
            psi_p[i] += h;
            let mut psi_m = psi0;
            psi_m[i] -= h;
            m[i][i] = (self.divergence(&reference, psi_p) + self.divergence(&reference, psi_m)) / (h * h);
            for j in (i + 1)..3 {
                let (hi, hj) = (steps[i], steps[j]);
                let v = (eval(hi, i, hj, j) - eval(hi, i, -hj, j) - eval(-hi, i, hj, j) + eval(-hi, i, -hj, j))
                    / (4.0 * hi * hj);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }
}

/// Inverse of a 3×3 matrix by cofactor expansion.
pub fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let c = [
        [cof(1, 2, 1, 2), -cof(1, 2, 0, 2), cof(1, 2, 0, 1)],
        [-cof(0, 2, 1, 2), cof(0, 2, 0, 2), -cof(0, 2, 0, 1)],
        [cof(0, 1, 1, 2), -cof(0, 1, 0, 2), cof(0, 1, 0, 1)],
    ];
    let det = m[0][0] * c[0][0] + m[0][1] * c[0][1] + m[0][2] * c[0][2];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = c[j][i] / det;
        }
    }
    Some(inv)
}

/// Relative distance between two complex vectors in the 2-norm.
pub fn relative_error(actual: &Array1<Complex64>, expected: &Array1<Complex64>) -> f64 {
    let diff: f64 = actual.iter().zip(expected.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
    let base: f64 = expected.iter().map(|b| b.norm_sqr()).sum();
    (diff / base).sqrt()
}

/// Entrywise relative error between two symmetric 3×3 matrices.
///
/// Structurally zero entries are measured against the geometric mean of the
/// two matching diagonal entries scaled by `1e-6`, the resolution of the
/// finite-difference Hessian.
pub fn fim_entrywise_error(actual: &[[f64; 3]; 3], expected: &[[f64; 3]; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let floor = 1e-6 * (expected[i][i].abs() * expected[j][j].abs()).sqrt();
            let denom = expected[i][j].abs().max(floor);
            worst = worst.max((actual[i][j] - expected[i][j]).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::steering_derivative;
    use crate::channel::{coupling_matrix, effective_sensing_channel, sample_cn, CrosstalkParams};
    use crate::metrics::{crb_theta, fisher_matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_positions(rng: &mut ChaCha8Rng, n: usize) -> AntennaPositions {
        let mut p = 0.0;
        AntennaPositions::new(
            (0..n)
                .map(|_| {
                    p += 0.005 + rng.random::<f64>() * 0.01;
                    p
                })
                .collect(),
        )
    }

    #[test]
    fn pilots_are_orthogonal() {
        let s = orthogonal_pilots(5, 16);
        for i in 0..5 {
            for j in 0..5 {
                let v: Complex64 = (0..16).map(|l| s[[i, l]] * s[[j, l]].conj()).sum();
                let expected = if i == j { 16.0 } else { 0.0 };
                assert!((v - Complex64::new(expected, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn cofactor_inverse() {
        let m = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let inv = invert3(&m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert!(invert3(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_none());
    }

    #[test]
    fn analytic_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let p = random_positions(&mut rng, 8);
            let theta = 0.1 + rng.random::<f64>() * 2.9;
            let fd = fd_steering_derivative(&p, theta, 0.01, 1e-6);
            assert!(relative_error(&steering_derivative(&p, theta, 0.01), &fd) < 1e-5);
            let c = coupling_matrix(&p, &CrosstalkParams::default()).unwrap();
            let (_, gd) = effective_sensing_channel(&p, &c, theta, 0.01);
            assert!(relative_error(&gd, &fd_effective_derivative(&p, &c, theta, 0.01, 1e-6)) < 1e-5);
        }
    }

    #[test]
    fn closed_form_fim_matches_likelihood_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (n, k, frame) = (6, 2, 32);
        let p = random_positions(&mut rng, n);
        let c = coupling_matrix(&p, &CrosstalkParams::default()).unwrap();
        let f = Array2::from_shape_fn((n, k + n), |_| sample_cn(&mut rng, 0.1));
        let f = Precoder::new(f, k, 100.0).unwrap();
        let theta = 1.1;
        let alpha = Complex64::new(0.4, -0.25);
        let pilots = orthogonal_pilots(k + n, frame);
        let model = EchoModel {
            positions: &p,
            coupling: &c,
            precoder: &f,
            pilots: &pilots,
            wavelength: 0.01,
            sigma2_n: 0.02,
        };
        let numeric = model.likelihood_fim([theta, alpha.re, alpha.im], [1e-6, 1e-4, 1e-4]);
        let (g, gd) = effective_sensing_channel(&p, &c, theta, 0.01);
        let analytic = fisher_matrix(&g, &gd, &f, alpha, 0.02, frame);
        assert!(fim_entrywise_error(&analytic.0, &numeric) < 1e-4);
        let crb = crb_theta(&g, &gd, &f, alpha, 0.02, frame).unwrap();
        let inv = invert3(&analytic.0).unwrap();
        assert!((crb - inv[0][0]).abs() / inv[0][0] < 1e-8);
    }
}
