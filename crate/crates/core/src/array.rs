//! Linear movable-antenna geometry.
//!
//! Positions are encoded through nonnegative displacements beyond the minimum
//! spacing, so any displacement vector inside the budget maps onto a layout
//! that satisfies both the spacing and the region constraints:
//!
//! ```text
//! p_n = p_min + (n - 1) * d0 + sum_{k <= n} delta_k,   sum_k delta_k <= p_max - p_min - (N - 1) * d0
//! ```

use ndarray::Array1;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{IsacError, Result};

/// Slack used when checking constraints on floating-point positions.
pub const GEOMETRY_TOLERANCE: f64 = 1e-12;

/// Static description of the movable array along a line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub n_elements: usize,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Minimum inter-element spacing in meters.
    pub d0: f64,
}

impl ArrayConfig {
    pub fn new(n_elements: usize, wavelength: f64, p_min: f64, p_max: f64, d0: f64) -> Result<Self> {
        let cfg = Self {
            n_elements,
            wavelength,
            p_min,
            p_max,
            d0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Array with half-wavelength minimum spacing.
    pub fn with_half_wavelength_spacing(
        n_elements: usize,
        wavelength: f64,
        p_min: f64,
        p_max: f64,
    ) -> Result<Self> {
        Self::new(n_elements, wavelength, p_min, p_max, wavelength / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elements == 0 {
            return Err(IsacError::Config("array needs at least one element".into()));
        }
        if !(self.wavelength > 0.0) || !self.wavelength.is_finite() {
            return Err(IsacError::Config(format!("wavelength must be positive, got {}", self.wavelength)));
        }
        if !(self.d0 > 0.0) || !self.d0.is_finite() {
            return Err(IsacError::Config(format!("minimum spacing must be positive, got {}", self.d0)));
        }
        let needed = self.min_aperture();
        if self.p_max - self.p_min < needed - GEOMETRY_TOLERANCE {
            return Err(IsacError::Config(format!(
                "movable region [{}, {}] is too small for {} elements at spacing {} (needs {})",
                self.p_min, self.p_max, self.n_elements, self.d0, needed
            )));
        }
        Ok(())
    }

    /// Aperture of the tightest admissible layout, `(N - 1) * d0`.
    pub fn min_aperture(&self) -> f64 {
        (self.n_elements.saturating_sub(1)) as f64 * self.d0
    }

    /// Total displacement budget `p_max - p_min - (N - 1) * d0`, clamped at zero.
    pub fn max_displacement(&self) -> f64 {
        (self.p_max - self.p_min - self.min_aperture()).max(0.0)
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }
}

/// Ordered element coordinates in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaPositions(Vec<f64>);

impl AntennaPositions {
    /// Wraps coordinates without checking them against any array configuration.
    pub fn new(p: Vec<f64>) -> Self {
        Self(p)
    }

    /// Wraps coordinates after checking spacing and region constraints.
    pub fn checked(p: Vec<f64>, cfg: &ArrayConfig) -> Result<Self> {
        let out = Self(p);
        out.check(cfg)?;
        Ok(out)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Verifies ordering with spacing at least `d0` and containment in `[p_min, p_max]`.
    pub fn check(&self, cfg: &ArrayConfig) -> Result<()> {
        if self.0.len() != cfg.n_elements {
            return Err(IsacError::Dimension {
                what: "antenna positions",
                expected: cfg.n_elements,
                got: self.0.len(),
            });
        }
        for (n, &p) in self.0.iter().enumerate() {
            if !p.is_finite() || p < cfg.p_min - GEOMETRY_TOLERANCE || p > cfg.p_max + GEOMETRY_TOLERANCE {
                return Err(IsacError::ConstraintViolation {
                    component: n,
                    reason: format!("position {p} outside [{}, {}]", cfg.p_min, cfg.p_max),
                });
            }
        }
        for n in 1..self.0.len() {
            let gap = self.0[n] - self.0[n - 1];
            if gap < cfg.d0 - GEOMETRY_TOLERANCE {
                return Err(IsacError::ConstraintViolation {
                    component: n,
                    reason: format!("spacing {gap} below minimum {}", cfg.d0),
                });
            }
        }
        Ok(())
    }

    /// Smallest pairwise separation.
    pub fn min_spacing(&self) -> f64 {
        self.0
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Nonnegative gaps beyond the minimum spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementVector(Vec<f64>);

impl DisplacementVector {
    pub fn new(delta: Vec<f64>) -> Self {
        Self(delta)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn check(&self, cfg: &ArrayConfig) -> Result<()> {
        if self.0.len() != cfg.n_elements {
            return Err(IsacError::Dimension {
                what: "displacement vector",
                expected: cfg.n_elements,
                got: self.0.len(),
            });
        }
        for (n, &d) in self.0.iter().enumerate() {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(IsacError::ConstraintViolation {
                    component: n,
                    reason: format!("displacement {d} is negative or not finite"),
                });
            }
        }
        let budget = cfg.max_displacement();
        let mut running = 0.0;
        for (n, &d) in self.0.iter().enumerate() {
            running += d;
            if running > budget * (1.0 + GEOMETRY_TOLERANCE) + GEOMETRY_TOLERANCE {
                return Err(IsacError::ConstraintViolation {
                    component: n,
                    reason: format!("cumulative displacement {running} exceeds budget {budget}"),
                });
            }
        }
        Ok(())
    }
}

/// Maps displacements onto element positions.
///
/// The last element saturates at `p_max` when the whole budget is spent; the
/// result is clamped to the region to absorb rounding.
pub fn displacements_to_positions(delta: &DisplacementVector, cfg: &ArrayConfig) -> Result<AntennaPositions> {
    delta.check(cfg)?;
    let budget = cfg.max_displacement();
    let last = cfg.n_elements - 1;
    let mut cumulative = 0.0;
    let p = delta
        .as_slice()
        .iter()
        .enumerate()
        .map(|(n, &d)| {
            cumulative += d;
            if cumulative >= budget {
                // budget exhausted: the tail is packed against p_max
                cfg.p_max - (last - n) as f64 * cfg.d0
            } else {
                (cfg.p_min + n as f64 * cfg.d0 + cumulative).clamp(cfg.p_min, cfg.p_max)
            }
        })
        .collect();
    Ok(AntennaPositions(p))
}

/// Minimum-spacing array anchored at `p_min` (all displacements zero).
pub fn compact_array(cfg: &ArrayConfig) -> AntennaPositions {
    AntennaPositions((0..cfg.n_elements).map(|n| cfg.p_min + n as f64 * cfg.d0).collect())
}

/// Far-field response `a_n = exp(j 2π/λ p_n cos θ) / sqrt(N)`.
pub fn steering_vector(p: &AntennaPositions, theta: f64, wavelength: f64) -> Array1<Complex64> {
    let n = p.len();
    let norm = 1.0 / (n as f64).sqrt();
    let k = 2.0 * PI / wavelength * theta.cos();
    p.as_slice()
        .iter()
        .map(|&pn| Complex64::from_polar(norm, k * pn))
        .collect()
}

/// Analytic `∂a/∂θ = -j (2π/λ) sin θ · diag(p) · a`.
pub fn steering_derivative(p: &AntennaPositions, theta: f64, wavelength: f64) -> Array1<Complex64> {
    let a = steering_vector(p, theta, wavelength);
    let scale = -2.0 * PI / wavelength * theta.sin();
    a.iter()
        .zip(p.as_slice())
        .map(|(an, &pn)| Complex64::new(0.0, scale * pn) * an)
        .collect()
}
