//! Differential-pair synapse array.
//!
//! Each weight is `x+ * G+ - x- * G-`. Weights only ever move by potentiating
//! one of the two devices; the update methods differ in how they recover once
//! the device that should be potentiated is already at `G_max`.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{sample_variation, DeviceParams, VariationFactor};

const PROGRAM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CrossbarError {
    #[error("expected a vector of length {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("index ({row}, {col}) outside a {rows}x{cols} array")]
    Index {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("target weight {target} at ({row}, {col}) exceeds the representable range {limit}")]
    TargetOutOfRange {
        row: usize,
        col: usize,
        target: f64,
        limit: f64,
    },
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Requested direction of a single weight change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Increase,
    Decrease,
}

/// How a weight update proceeds once the device to potentiate is saturated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdateMethod {
    /// Reset both devices, rebuild the old weight on one device, then apply
    /// the pending step.
    #[serde(rename = "a")]
    A,
    /// Reset the opposing device and rebuild it to one step below the level
    /// that would restore the old weight.
    #[serde(rename = "b")]
    B,
    /// Depress the opposing device by one pulse (bidirectional devices).
    #[serde(rename = "c")]
    C,
}

impl UpdateMethod {
    pub const ALL: [UpdateMethod; 3] = [UpdateMethod::A, UpdateMethod::B, UpdateMethod::C];

    pub fn as_str(self) -> &'static str {
        match self {
            UpdateMethod::A => "a",
            UpdateMethod::B => "b",
            UpdateMethod::C => "c",
        }
    }
}

impl fmt::Display for UpdateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseMethodError {
    #[error("'d' is the dual-saturation reset applied under every method, not a selectable method")]
    ResetRule,
    #[error("unknown update method '{0}' (expected a, b or c)")]
    Unknown(String),
}

impl FromStr for UpdateMethod {
    type Err = ParseMethodError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(UpdateMethod::A),
            "b" => Ok(UpdateMethod::B),
            "c" => Ok(UpdateMethod::C),
            "d" => Err(ParseMethodError::ResetRule),
            other => Err(ParseMethodError::Unknown(other.to_string())),
        }
    }
}

/// One unit synapse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConductancePair {
    pub g_plus: f64,
    pub g_minus: f64,
    pub x_plus: VariationFactor,
    pub x_minus: VariationFactor,
}

impl ConductancePair {
    pub fn at(g_plus: f64, g_minus: f64) -> Self {
        Self {
            g_plus,
            g_minus,
            x_plus: VariationFactor::NOMINAL,
            x_minus: VariationFactor::NOMINAL,
        }
    }

    /// Weight as read out through the (possibly varied) devices.
    #[inline]
    pub fn weight(&self) -> f64 {
        self.x_plus.get() * self.g_plus - self.x_minus.get() * self.g_minus
    }

    /// Weight an ideal device would show for the same pulse history.
    #[inline]
    pub fn nominal_weight(&self) -> f64 {
        self.g_plus - self.g_minus
    }

    /// Applies one weight update. `Decrease` is the mirror of `Increase`
    /// with the roles of the two devices swapped.
    pub fn update(&mut self, direction: Direction, method: UpdateMethod, params: &DeviceParams) {
        // A doubly saturated pair is reinitialized instead of updated.
        if params.is_saturated(self.g_plus) && params.is_saturated(self.g_minus) {
            self.g_plus = params.g_min;
            self.g_minus = params.g_min;
            return;
        }
        let (primary, opposing) = match direction {
            Direction::Increase => (&mut self.g_plus, &mut self.g_minus),
            Direction::Decrease => (&mut self.g_minus, &mut self.g_plus),
        };
        step_toward(primary, opposing, method, params);
        if params.is_saturated(self.g_plus) && params.is_saturated(self.g_minus) {
            self.g_plus = params.g_min;
            self.g_minus = params.g_min;
        }
    }
}

/// Moves `primary - opposing` up by one step.
fn step_toward(primary: &mut f64, opposing: &mut f64, method: UpdateMethod, p: &DeviceParams) {
    if !p.is_saturated(*primary) {
        *primary = p.potentiate_unchecked(*primary);
        return;
    }
    match method {
        UpdateMethod::A => {
            let w_old = *primary - *opposing;
            *primary = p.g_min;
            *opposing = p.g_min;
            while *primary - *opposing < w_old && !p.is_saturated(*primary) {
                *primary = p.potentiate_unchecked(*primary);
            }
            *primary = p.potentiate_unchecked(*primary);
        }
        UpdateMethod::B => {
            let w_old = *primary - *opposing;
            *opposing = p.g_min;
            loop {
                let next = p.potentiate_unchecked(*opposing);
                if next == *opposing || *primary - next <= w_old {
                    break;
                }
                *opposing = next;
            }
        }
        UpdateMethod::C => {
            *opposing = p.depress_unchecked(*opposing);
        }
    }
}

/// Initial conductance state of a freshly built array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every device at `g_min`.
    Zero,
    /// Every device independently potentiated by a uniform random pulse
    /// count in `[0, n_max / 8]`.
    #[default]
    LowConductance,
}

/// An `rows x cols` array of conductance pairs. Row `i` is driven by
/// pre-neuron `i` in the forward direction; column `j` feeds post-neuron `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossbar {
    rows: usize,
    cols: usize,
    params: DeviceParams,
    pairs: Vec<ConductancePair>,
    // Read-out weights, kept in sync with `pairs`.
    weights: Vec<f64>,
}

impl Crossbar {
    /// All devices at `g_min` with nominal variation factors.
    pub fn new(rows: usize, cols: usize, params: DeviceParams) -> Self {
        let pair = ConductancePair::at(params.g_min, params.g_min);
        Self {
            rows,
            cols,
            params,
            pairs: vec![pair; rows * cols],
            weights: vec![0.0; rows * cols],
        }
    }

    pub fn init<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        params: DeviceParams,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Self {
        let mut xbar = Self::new(rows, cols, params);
        if scheme == InitScheme::LowConductance {
            let max_pulses = params.n_max / 8;
            let levels: Vec<f64> = (0..=max_pulses).map(|k| params.conductance_after(k)).collect();
            for pair in &mut xbar.pairs {
                pair.g_plus = levels[rng.random_range(0..=max_pulses) as usize];
                pair.g_minus = levels[rng.random_range(0..=max_pulses) as usize];
            }
        }
        xbar.refresh_weights();
        xbar
    }

    /// Samples a variation factor for every device (G+ then G-, row-major).
    pub fn sample_variation<R: Rng + ?Sized>(&mut self, sigma: f64, rng: &mut R) {
        for pair in &mut self.pairs {
            pair.x_plus = sample_variation(sigma, rng);
            pair.x_minus = sample_variation(sigma, rng);
        }
        self.refresh_weights();
    }

    fn refresh_weights(&mut self) {
        for (w, pair) in self.weights.iter_mut().zip(&self.pairs) {
            *w = pair.weight();
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn pairs(&self) -> &[ConductancePair] {
        &self.pairs
    }

    /// Read-out weights, row-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `g_plus - g_minus` for every pair, row-major.
    pub fn nominal_weights(&self) -> Vec<f64> {
        self.pairs.iter().map(ConductancePair::nominal_weight).collect()
    }

    fn index(&self, row: usize, col: usize) -> Result<usize, CrossbarError> {
        if row < self.rows && col < self.cols {
            Ok(row * self.cols + col)
        } else {
            Err(CrossbarError::Index {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    pub fn pair(&self, row: usize, col: usize) -> Result<&ConductancePair, CrossbarError> {
        Ok(&self.pairs[self.index(row, col)?])
    }

    /// Overwrites one pair. Conductances are clamped into the device range.
    pub fn set_pair(
        &mut self,
        row: usize,
        col: usize,
        pair: ConductancePair,
    ) -> Result<(), CrossbarError> {
        let idx = self.index(row, col)?;
        let clamp = |g: f64| g.clamp(self.params.g_min, self.params.g_max);
        let pair = ConductancePair {
            g_plus: clamp(pair.g_plus),
            g_minus: clamp(pair.g_minus),
            ..pair
        };
        self.pairs[idx] = pair;
        self.weights[idx] = pair.weight();
        Ok(())
    }

    pub fn read_weight(&self, row: usize, col: usize) -> Result<f64, CrossbarError> {
        Ok(self.weights[self.index(row, col)?])
    }

    /// Column currents for row voltages: `out[j] = sum_i w[i][j] * v[i]`.
    pub fn forward_mvm(&self, voltages: &[f64]) -> Result<Vec<f64>, CrossbarError> {
        let mut out = vec![0.0; self.cols];
        self.forward_into(voltages, &mut out)?;
        Ok(out)
    }

    pub fn forward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError> {
        expect_len(self.rows, voltages.len())?;
        expect_len(self.cols, out.len())?;
        out.fill(0.0);
        for (v, row) in voltages.iter().zip(self.weights.chunks_exact(self.cols)) {
            if *v == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        Ok(())
    }

    /// Row currents for column voltages: `out[i] = sum_j w[i][j] * v[j]`.
    pub fn backward_mvm(&self, voltages: &[f64]) -> Result<Vec<f64>, CrossbarError> {
        let mut out = vec![0.0; self.rows];
        self.backward_into(voltages, &mut out)?;
        Ok(out)
    }

    pub fn backward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError> {
        expect_len(self.cols, voltages.len())?;
        expect_len(self.rows, out.len())?;
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.cols)) {
            *o = row.iter().zip(voltages).map(|(w, v)| w * v).sum();
        }
        Ok(())
    }

    pub fn apply_update(
        &mut self,
        row: usize,
        col: usize,
        direction: Direction,
        method: UpdateMethod,
    ) -> Result<(), CrossbarError> {
        let idx = self.index(row, col)?;
        self.update_at(idx, direction, method);
        Ok(())
    }

    #[inline]
    pub(crate) fn update_at(&mut self, idx: usize, direction: Direction, method: UpdateMethod) {
        let pair = &mut self.pairs[idx];
        pair.update(direction, method, &self.params);
        self.weights[idx] = pair.weight();
    }

    /// Programs nominal conductances for row-major `targets` as if every
    /// device were ideal: the positive (or negative) part is built up pulse by
    /// pulse on one device until it reaches the target, the other stays at
    /// `g_min`. Variation factors are left untouched.
    pub fn program_weights(&mut self, targets: &[f64]) -> Result<(), CrossbarError> {
        expect_len(self.rows * self.cols, targets.len())?;
        let p = self.params;
        let limit = p.range();
        for (idx, &target) in targets.iter().enumerate() {
            if !(target.abs() <= limit + PROGRAM_TOL) {
                return Err(CrossbarError::TargetOutOfRange {
                    row: idx / self.cols,
                    col: idx % self.cols,
                    target,
                    limit,
                });
            }
        }
        for (idx, &target) in targets.iter().enumerate() {
            let mut g = p.g_min;
            while g - p.g_min < target.abs() - PROGRAM_TOL && !p.is_saturated(g) {
                g = p.potentiate_unchecked(g);
            }
            let pair = &mut self.pairs[idx];
            if target >= 0.0 {
                pair.g_plus = g;
                pair.g_minus = p.g_min;
            } else {
                pair.g_plus = p.g_min;
                pair.g_minus = g;
            }
            self.weights[idx] = pair.weight();
        }
        Ok(())
    }

    /// Writes the array as one text header line followed by
    /// `(g_plus, g_minus, x_plus, x_minus)` per pair, row-major,
    /// little-endian f64.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), CrossbarError> {
        let p = &self.params;
        writeln!(
            w,
            "crossbar-snapshot v1 rows={} cols={} alpha_p={} beta_p={} alpha_d={} beta_d={} g_min={} g_max={} n_max={}",
            self.rows, self.cols, p.alpha_p, p.beta_p, p.alpha_d, p.beta_d, p.g_min, p.g_max, p.n_max
        )?;
        let mut buf = Vec::with_capacity(self.pairs.len() * 32);
        for pair in &self.pairs {
            for v in [pair.g_plus, pair.g_minus, pair.x_plus.get(), pair.x_minus.get()] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(mut r: R) -> Result<Self, CrossbarError> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("crossbar-snapshot") || fields.next() != Some("v1") {
            return Err(CrossbarError::Snapshot("missing 'crossbar-snapshot v1' header".into()));
        }
        let mut get = |key: &str| -> Result<String, CrossbarError> {
            let field = fields
                .next()
                .ok_or_else(|| CrossbarError::Snapshot(format!("missing field {key}")))?;
            field
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| CrossbarError::Snapshot(format!("expected {key}=..., got {field}")))
        };
        fn num<T: FromStr>(key: &str, s: String) -> Result<T, CrossbarError> {
            s.parse()
                .map_err(|_| CrossbarError::Snapshot(format!("bad value for {key}: {s}")))
        }
        let rows: usize = num("rows", get("rows")?)?;
        let cols: usize = num("cols", get("cols")?)?;
        let params = DeviceParams {
            alpha_p: num("alpha_p", get("alpha_p")?)?,
            beta_p: num("beta_p", get("beta_p")?)?,
            alpha_d: num("alpha_d", get("alpha_d")?)?,
            beta_d: num("beta_d", get("beta_d")?)?,
            g_min: num("g_min", get("g_min")?)?,
            g_max: num("g_max", get("g_max")?)?,
            n_max: num("n_max", get("n_max")?)?,
        };
        params
            .validate()
            .map_err(|e| CrossbarError::Snapshot(e.to_string()))?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = rows * cols * 32;
        if payload.len() != expected {
            return Err(CrossbarError::Snapshot(format!(
                "expected {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
        let mut xbar = Self::new(rows, cols, params);
        for pair in &mut xbar.pairs {
            let mut next = || values.next().expect("length checked");
            *pair = ConductancePair {
                g_plus: next(),
                g_minus: next(),
                x_plus: VariationFactor::new(next()),
                x_minus: VariationFactor::new(next()),
            };
        }
        xbar.refresh_weights();
        Ok(xbar)
    }
}

fn expect_len(expected: usize, actual: usize) -> Result<(), CrossbarError> {
    if expected == actual {
        Ok(())
    } else {
        Err(CrossbarError::Dimension { expected, actual })
    }
}
