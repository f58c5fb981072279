//! Behavioral conductance model for a single synapse device.
//!
//! A pulse moves the conductance by a state-dependent step:
//!
//! ```text
//! potentiation: G <- G + alpha_p * exp(-beta_p * (G - G_min) / (G_max - G_min))
//! depression:   G <- G - alpha_d * exp(-beta_d * (G_max - G) / (G_max - G_min))
//! ```
//!
//! Both are clamped to `[G_min, G_max]`. The step scale `alpha` is not a free
//! parameter here: it is solved from `(beta, n_max)` so that exactly `n_max`
//! potentiation pulses carry a device from `G_min` to `G_max`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A device within this distance of `g_max` counts as saturated.
pub const SATURATION_TOL: f64 = 1e-9;

const MAX_BISECTION_STEPS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
    #[error("conductance {g} outside [{g_min}, {g_max}]")]
    OutOfRange { g: f64, g_min: f64, g_max: f64 },
    #[error("step-size search did not converge for beta={beta}, n_max={n_max}")]
    NoConvergence { beta: f64, n_max: u32 },
}

/// Parameters of the potentiation/depression model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    pub alpha_p: f64,
    pub beta_p: f64,
    pub alpha_d: f64,
    pub beta_d: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub n_max: u32,
}

impl DeviceParams {
    /// Symmetric device on the normalized range `[0, 1]`: one `beta` for
    /// both directions and `alpha` solved from the span contract.
    pub fn symmetric(beta: f64, n_max: u32) -> Result<Self, DeviceError> {
        Self::symmetric_in_range(beta, n_max, 0.0, 1.0)
    }

    pub fn symmetric_in_range(
        beta: f64,
        n_max: u32,
        g_min: f64,
        g_max: f64,
    ) -> Result<Self, DeviceError> {
        let alpha = solve_step_size(beta, n_max, g_min, g_max)?;
        let params = Self {
            alpha_p: alpha,
            beta_p: beta,
            alpha_d: alpha,
            beta_d: beta,
            g_min,
            g_max,
            n_max,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |msg: &str| Err(DeviceError::InvalidParams(msg.to_string()));
        if !(self.g_min < self.g_max) || !self.g_min.is_finite() || !self.g_max.is_finite() {
            return bad("g_min must be below g_max");
        }
        if !(self.alpha_p > 0.0 && self.alpha_d > 0.0) {
            return bad("alpha_p and alpha_d must be positive");
        }
        if !(self.beta_p >= 0.0 && self.beta_d >= 0.0) {
            return bad("beta_p and beta_d must be non-negative");
        }
        if self.n_max < 2 {
            return bad("n_max must be at least 2");
        }
        Ok(())
    }

    #[inline]
    pub fn range(&self) -> f64 {
        self.g_max - self.g_min
    }

    /// Conductance change of one potentiation pulse at `g`, before clamping.
    #[inline]
    pub fn potentiation_step(&self, g: f64) -> f64 {
        self.alpha_p * (-self.beta_p * (g - self.g_min) / self.range()).exp()
    }

    /// Magnitude of one depression pulse at `g`, before clamping.
    #[inline]
    pub fn depression_step(&self, g: f64) -> f64 {
        self.alpha_d * (-self.beta_d * (self.g_max - g) / self.range()).exp()
    }

    #[inline]
    pub fn is_saturated(&self, g: f64) -> bool {
        g >= self.g_max - SATURATION_TOL
    }

    #[inline]
    pub(crate) fn potentiate_unchecked(&self, g: f64) -> f64 {
        (g + self.potentiation_step(g)).min(self.g_max)
    }

    #[inline]
    pub(crate) fn depress_unchecked(&self, g: f64) -> f64 {
        (g - self.depression_step(g)).max(self.g_min)
    }

    fn check(&self, g: f64) -> Result<(), DeviceError> {
        if g >= self.g_min && g <= self.g_max {
            Ok(())
        } else {
            Err(DeviceError::OutOfRange {
                g,
                g_min: self.g_min,
                g_max: self.g_max,
            })
        }
    }

    /// One potentiation pulse, clamped at `g_max`.
    pub fn potentiate(&self, g: f64) -> Result<f64, DeviceError> {
        self.check(g)?;
        Ok(self.potentiate_unchecked(g))
    }

    /// One depression pulse, clamped at `g_min`.
    pub fn depress(&self, g: f64) -> Result<f64, DeviceError> {
        self.check(g)?;
        Ok(self.depress_unchecked(g))
    }

    /// Conductance reached after `pulses` potentiation pulses from `g_min`.
    pub fn conductance_after(&self, pulses: u32) -> f64 {
        (0..pulses).fold(self.g_min, |g, _| self.potentiate_unchecked(g))
    }
}

fn unclamped_span(alpha: f64, beta: f64, pulses: u32, g_min: f64, range: f64) -> f64 {
    let mut g = g_min;
    for _ in 0..pulses {
        g += alpha * (-beta * (g - g_min) / range).exp();
    }
    g
}

/// Solves the step scale `alpha` such that `n_max` unclamped pulses from
/// `g_min` land on `g_max` (from above, within 1e-9) while `n_max - 1`
/// pulses stay strictly below it.
pub fn solve_step_size(beta: f64, n_max: u32, g_min: f64, g_max: f64) -> Result<f64, DeviceError> {
    if n_max < 2 {
        return Err(DeviceError::InvalidParams("n_max must be at least 2".into()));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(DeviceError::InvalidParams("beta must be non-negative".into()));
    }
    if !(g_min < g_max) {
        return Err(DeviceError::InvalidParams("g_min must be below g_max".into()));
    }
    let range = g_max - g_min;
    if beta == 0.0 {
        return Ok(range / n_max as f64);
    }

    // Steps shrink as G grows, so a constant step of range/n_max undershoots
    // and a single full-range step overshoots.
    let mut lo = range / n_max as f64;
    let mut hi = range;
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if unclamped_span(mid, beta, n_max, g_min, range) >= g_max {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let last = unclamped_span(hi, beta, n_max, g_min, range);
    let before_last = unclamped_span(hi, beta, n_max - 1, g_min, range);
    if last >= g_max && last - g_max <= 1e-9 && before_last < g_max {
        Ok(hi)
    } else {
        Err(DeviceError::NoConvergence { beta, n_max })
    }
}

/// Potentiation and depression curves of one device, as plotted per pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTrace {
    /// Conductance after pulse k (k = 1..=pulses) starting from `g_min`.
    pub potentiation: Vec<f64>,
    /// Conductance after pulse k starting from `g_max`.
    pub depression: Vec<f64>,
}

pub fn trace_response(params: &DeviceParams, pulses: usize) -> ResponseTrace {
    let mut potentiation = Vec::with_capacity(pulses);
    let mut g = params.g_min;
    for _ in 0..pulses {
        g = params.potentiate_unchecked(g);
        potentiation.push(g);
    }
    let mut depression = Vec::with_capacity(pulses);
    let mut g = params.g_max;
    for _ in 0..pulses {
        g = params.depress_unchecked(g);
        depression.push(g);
    }
    ResponseTrace {
        potentiation,
        depression,
    }
}

/// Static multiplicative scale of one device's conductance curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationFactor(f64);

impl VariationFactor {
    pub const NOMINAL: Self = Self(1.0);

    pub fn new(x: f64) -> Self {
        Self(x.max(0.0))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for VariationFactor {
    fn default() -> Self {
        Self::NOMINAL
    }
}

/// Draws `max(0, N(1, sigma))`. With `sigma == 0` no randomness is consumed.
pub fn sample_variation<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> VariationFactor {
    if sigma <= 0.0 {
        return VariationFactor::NOMINAL;
    }
    let normal = Normal::new(1.0, sigma).expect("sigma is finite and positive");
    VariationFactor::new(normal.sample(rng))
}
