//! Multilayer perceptron on top of crossbar layers.
//!
//! Hidden neurons use a hard sigmoid; the output layer uses softmax with a
//! cross-entropy loss. Every non-output layer carries one extra bias neuron
//! fixed at 1, which occupies the last row of the following weight layer.
//! In hardware the hard-sigmoid derivative `1/(2c)` is replaced by a 0/1 gate,
//! and weights only see the sign of the post-neuron delta.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossbar::{Crossbar, CrossbarError, Direction, InitScheme};
use crate::device::DeviceParams;

pub const MNIST_INPUTS: usize = 28 * 28;
pub const MNIST_CLASSES: usize = 10;

/// A backpropagated sum smaller than this fraction of the magnitudes of its
/// terms is cancellation residue. The output deltas sum to exactly zero, so
/// a hidden unit whose outgoing weights are all equal has a delta of exactly
/// zero; rounding would otherwise hand it a random sign.
pub const CANCELLATION_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("expected {expected} values, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("label {0} outside the output layer")]
    Label(usize),
    #[error(transparent)]
    Crossbar(#[from] CrossbarError),
}

/// Layer sizes (without bias neurons) and the hard-sigmoid half-width of
/// each hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub c: Vec<f64>,
}

impl Topology {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize, c: Vec<f64>) -> Result<Self, NetworkError> {
        if input == 0 || output == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(NetworkError::Topology("layer sizes must be positive".into()));
        }
        if c.len() != hidden.len() {
            return Err(NetworkError::Topology(format!(
                "{} hidden layers but {} values of c",
                hidden.len(),
                c.len()
            )));
        }
        if c.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(NetworkError::Topology("c must be positive".into()));
        }
        Ok(Self { input, hidden, output, c })
    }

    /// 784 inputs, the given hidden layers, 10 outputs.
    pub fn mnist(hidden: &[usize], c: &[f64]) -> Result<Self, NetworkError> {
        Self::new(MNIST_INPUTS, hidden.to_vec(), MNIST_CLASSES, c.to_vec())
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(rows, cols)` of every weight layer; rows include the bias neuron.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let sizes: Vec<usize> = std::iter::once(self.input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output))
            .collect();
        sizes.windows(2).map(|w| (w[0] + 1, w[1])).collect()
    }
}

/// Hard sigmoid: 0 below `-c`, 1 above `c`, `(s + c) / (2c)` in between.
#[inline]
pub fn hard_sigmoid(s: f64, c: f64) -> f64 {
    if s < -c {
        0.0
    } else if s > c {
        1.0
    } else {
        (s + c) / (2.0 * c)
    }
}

/// Hardware derivative: true on the ramp (boundaries included).
#[inline]
pub fn hard_sigmoid_gate(s: f64, c: f64) -> bool {
    s.abs() <= c
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of the cross-entropy loss with respect to the output weighted
/// sums: `p - onehot(label)`.
pub fn output_delta(p: &[f64], label: usize) -> Result<Vec<f64>, NetworkError> {
    if label >= p.len() {
        return Err(NetworkError::Label(label));
    }
    let mut delta = p.to_vec();
    delta[label] -= 1.0;
    Ok(delta)
}

/// Anything that can act as a transposable weight layer.
pub trait WeightLayer {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn forward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError>;
    fn backward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError>;
    /// Effective weights, row-major.
    fn weight_slice(&self) -> &[f64];
}

impl WeightLayer for Crossbar {
    fn rows(&self) -> usize {
        Crossbar::rows(self)
    }
    fn cols(&self) -> usize {
        Crossbar::cols(self)
    }
    fn forward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError> {
        Crossbar::forward_into(self, voltages, out)
    }
    fn backward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError> {
        Crossbar::backward_into(self, voltages, out)
    }
    fn weight_slice(&self) -> &[f64] {
        self.weights()
    }
}

/// Real-valued weight matrix, row-major, same layout as a crossbar.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl DenseLayer {
    pub fn from_crossbar(xbar: &Crossbar) -> Self {
        Self {
            rows: xbar.rows(),
            cols: xbar.cols(),
            weights: xbar.weights().to_vec(),
        }
    }
}

impl WeightLayer for DenseLayer {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn forward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError> {
        check_len(self.rows, voltages.len())?;
        check_len(self.cols, out.len())?;
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
    fn backward_into(&self, voltages: &[f64], out: &mut [f64]) -> Result<(), CrossbarError> {
        check_len(self.cols, voltages.len())?;
        check_len(self.rows, out.len())?;
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.cols)) {
            *o = row.iter().zip(voltages).map(|(w, v)| w * v).sum();
        }
        Ok(())
    }
    fn weight_slice(&self) -> &[f64] {
        &self.weights
    }
}

fn check_len(expected: usize, actual: usize) -> Result<(), CrossbarError> {
    if expected == actual {
        Ok(())
    } else {
        Err(CrossbarError::Dimension { expected, actual })
    }
}

/// Everything one forward pass leaves behind for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Weighted sums, one vector per weight layer.
    pub s: Vec<Vec<f64>>,
    /// Inputs of each weight layer, bias (1.0) appended as the last entry.
    pub a: Vec<Vec<f64>>,
    /// Hardware derivative of each hidden layer.
    pub gate: Vec<Vec<bool>>,
    /// Output probabilities.
    pub p: Vec<f64>,
}

impl ForwardTrace {
    pub fn predicted(&self) -> usize {
        argmax(&self.p)
    }
}

/// Deltas of the weight-layer outputs, indexed like `ForwardTrace::s`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub delta: Vec<Vec<f64>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_layers<L: WeightLayer>(topology: &Topology, layers: &[L]) -> Result<(), NetworkError> {
    let shapes = topology.layer_shapes();
    if shapes.len() != layers.len() {
        return Err(NetworkError::Topology(format!(
            "topology has {} weight layers, got {}",
            shapes.len(),
            layers.len()
        )));
    }
    for (&(rows, cols), layer) in shapes.iter().zip(layers) {
        if layer.rows() != rows || layer.cols() != cols {
            return Err(NetworkError::Topology(format!(
                "expected a {rows}x{cols} layer, got {}x{}",
                layer.rows(),
                layer.cols()
            )));
        }
    }
    Ok(())
}

/// Runs `pixels` (without bias) through the network.
pub fn forward<L: WeightLayer>(
    topology: &Topology,
    layers: &[L],
    pixels: &[f64],
) -> Result<ForwardTrace, NetworkError> {
    check_layers(topology, layers)?;
    if pixels.len() != topology.input {
        return Err(NetworkError::Dimension {
            expected: topology.input,
            actual: pixels.len(),
        });
    }
    let depth = layers.len();
    let mut input = Vec::with_capacity(pixels.len() + 1);
    input.extend_from_slice(pixels);
    input.push(1.0);

    let mut s = Vec::with_capacity(depth);
    let mut a = Vec::with_capacity(depth);
    let mut gate = Vec::with_capacity(depth - 1);
    a.push(input);
    for (l, layer) in layers.iter().enumerate() {
        let mut sums = vec![0.0; layer.cols()];
        layer.forward_into(&a[l], &mut sums)?;
        if l + 1 < depth {
            let c = topology.c[l];
            let mut act: Vec<f64> = sums.iter().map(|&v| hard_sigmoid(v, c)).collect();
            act.push(1.0);
            gate.push(sums.iter().map(|&v| hard_sigmoid_gate(v, c)).collect());
            a.push(act);
        }
        s.push(sums);
    }
    let p = softmax(&s[depth - 1]);
    Ok(ForwardTrace { s, a, gate, p })
}

/// Class with the highest output weighted sum (equivalently probability).
pub fn predict<L: WeightLayer>(topology: &Topology, layers: &[L], pixels: &[f64]) -> Result<usize, NetworkError> {
    let trace = forward(topology, layers, pixels)?;
    Ok(argmax(trace.s.last().expect("at least one layer")))
}

/// Backpropagates `delta_next` through `layer` and gates it:
/// `delta_i = gate_i * sum_j w[i][j] * delta_next[j]`. The bias row of
/// `layer` receives no delta, and sums lost to cancellation (see
/// [`CANCELLATION_TOL`]) are exactly zero.
pub fn hidden_delta<L: WeightLayer>(
    layer: &L,
    delta_next: &[f64],
    gate: &[bool],
) -> Result<Vec<f64>, NetworkError> {
    if gate.len() + 1 != layer.rows() {
        return Err(NetworkError::Dimension {
            expected: layer.rows() - 1,
            actual: gate.len(),
        });
    }
    let mut back = vec![0.0; layer.rows()];
    layer.backward_into(delta_next, &mut back)?;
    back.pop();
    let cols = layer.cols();
    let weights = layer.weight_slice();
    for (i, (d, &g)) in back.iter_mut().zip(gate).enumerate() {
        if !g {
            *d = 0.0;
            continue;
        }
        let magnitude: f64 = weights[i * cols..(i + 1) * cols]
            .iter()
            .zip(delta_next)
            .map(|(w, v)| (w * v).abs())
            .sum();
        if d.abs() <= CANCELLATION_TOL * magnitude {
            *d = 0.0;
        }
    }
    Ok(back)
}

/// Output delta followed by the gated hidden-delta chain.
pub fn backward<L: WeightLayer>(
    layers: &[L],
    trace: &ForwardTrace,
    label: usize,
) -> Result<DeltaSet, NetworkError> {
    let depth = layers.len();
    let mut delta = vec![Vec::new(); depth];
    delta[depth - 1] = output_delta(&trace.p, label)?;
    for l in (0..depth - 1).rev() {
        delta[l] = hidden_delta(&layers[l + 1], &delta[l + 1], &trace.gate[l])?;
    }
    Ok(DeltaSet { delta })
}

/// Update direction for one synapse from its pre-activation and the
/// post-neuron delta. Only signs matter.
#[inline]
pub fn signal(pre_activation: f64, post_delta: f64) -> Option<Direction> {
    if pre_activation <= 0.0 || post_delta == 0.0 {
        None
    } else if post_delta < 0.0 {
        Some(Direction::Increase)
    } else {
        Some(Direction::Decrease)
    }
}

/// Per-synapse update directions of one weight layer, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalGrid {
    pub rows: usize,
    pub cols: usize,
    pub signals: Vec<Option<Direction>>,
}

impl SignalGrid {
    pub fn get(&self, row: usize, col: usize) -> Option<Direction> {
        self.signals[row * self.cols + col]
    }
}

pub fn update_signals(trace: &ForwardTrace, deltas: &DeltaSet) -> Vec<SignalGrid> {
    trace
        .a
        .iter()
        .zip(&deltas.delta)
        .map(|(a, d)| SignalGrid {
            rows: a.len(),
            cols: d.len(),
            signals: a
                .iter()
                .flat_map(|&ai| d.iter().map(move |&dj| signal(ai, dj)))
                .collect(),
        })
        .collect()
}

/// A network whose weight layers are crossbars.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarNetwork {
    pub topology: Topology,
    pub layers: Vec<Crossbar>,
}

impl CrossbarNetwork {
    pub fn new<R: Rng + ?Sized>(
        topology: Topology,
        params: DeviceParams,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Self {
        let layers = topology
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| Crossbar::init(rows, cols, params, scheme, rng))
            .collect();
        Self { topology, layers }
    }

    /// Samples per-device variation factors for every layer.
    pub fn sample_variation<R: Rng + ?Sized>(&mut self, sigma: f64, rng: &mut R) {
        for layer in &mut self.layers {
            layer.sample_variation(sigma, rng);
        }
    }

    pub fn forward(&self, pixels: &[f64]) -> Result<ForwardTrace, NetworkError> {
        forward(&self.topology, &self.layers, pixels)
    }

    pub fn backward(&self, trace: &ForwardTrace, label: usize) -> Result<DeltaSet, NetworkError> {
        backward(&self.layers, trace, label)
    }

    pub fn predict(&self, pixels: &[f64]) -> Result<usize, NetworkError> {
        predict(&self.topology, &self.layers, pixels)
    }

    /// Nominal weights of every layer, row-major.
    pub fn nominal_weights(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(Crossbar::nominal_weights).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::ConductancePair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hard_sigmoid_examples() {
        assert_eq!(hard_sigmoid(-2.0, 1.0), 0.0);
        assert_eq!(hard_sigmoid(2.0, 1.0), 1.0);
        assert_eq!(hard_sigmoid(0.0, 1.0), 0.5);
        assert_eq!(hard_sigmoid(-1.0, 1.0), 0.0);
        assert_eq!(hard_sigmoid(1.0, 1.0), 1.0);
        assert!(hard_sigmoid_gate(0.0, 1.0));
        assert!(!hard_sigmoid_gate(5.0, 1.0));
        assert!(hard_sigmoid_gate(-1.0, 1.0));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.3; 10]);
        assert!(p.iter().all(|v| (v - 0.1).abs() < 1e-15));

        let mut s = vec![0.0; 10];
        s[4] = 1000.0;
        let p = softmax(&s);
        assert!((p[4] - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));

        let mut s = vec![0.0; 10];
        s[1] = 2f64.ln();
        let p = softmax(&s);
        // Unshifted formula at small magnitude.
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for (pk, sk) in p.iter().zip(&s) {
            assert!((pk - sk.exp() / z).abs() < 1e-15);
        }
        assert!((p[1] - 2.0 / 11.0).abs() < 1e-15);
        assert!((p[0] - 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn output_delta_examples() {
        let mut target = vec![0.0; 10];
        target[3] = 1.0;
        assert!(output_delta(&target, 3).unwrap().iter().all(|d| *d == 0.0));
        let d = output_delta(&[0.1; 10], 3).unwrap();
        for (k, v) in d.iter().enumerate() {
            let expected = if k == 3 { -0.9 } else { 0.1 };
            assert!((v - expected).abs() < 1e-15);
        }
        assert!(output_delta(&[0.1; 10], 10).is_err());
    }

    #[test]
    fn output_delta_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let s: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..10);
            let loss = |s: &[f64]| -softmax(s)[label].ln();
            let d = output_delta(&softmax(&s), label).unwrap();
            for k in 0..10 {
                let h = 1e-6;
                let mut up = s.clone();
                up[k] += h;
                let mut down = s.clone();
                down[k] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                assert!((fd - d[k]).abs() < 1e-4);
            }
        }
    }

    fn zero_mnist_net() -> CrossbarNetwork {
        let top = Topology::mnist(&[200], &[5.0]).unwrap();
        let params = DeviceParams::symmetric(0.0, 64).unwrap();
        CrossbarNetwork::new(top, params, InitScheme::Zero, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn zero_network_forward() {
        let net = zero_mnist_net();
        let trace = net.forward(&[0.0; MNIST_INPUTS]).unwrap();
        assert!(trace.s[0].iter().all(|v| *v == 0.0));
        assert!(trace.a[1][..200].iter().all(|v| *v == 0.5));
        assert_eq!(trace.a[1][200], 1.0);
        assert!(trace.gate[0].iter().all(|g| *g));
        assert!(trace.p.iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn bias_row_drives_zero_image() {
        let mut net = zero_mnist_net();
        let bias_row = MNIST_INPUTS;
        for j in 0..200 {
            let g = (j % 64) as f64 / 64.0;
            net.layers[0].set_pair(bias_row, j, ConductancePair::at(g, 0.0)).unwrap();
        }
        let trace = net.forward(&[0.0; MNIST_INPUTS]).unwrap();
        for j in 0..200 {
            assert_eq!(trace.s[0][j], (j % 64) as f64 / 64.0);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = zero_mnist_net();
        assert!(matches!(
            net.forward(&[0.0; 10]),
            Err(NetworkError::Dimension { expected: 784, actual: 10 })
        ));
        assert!(Topology::mnist(&[200], &[]).is_err());
        assert!(Topology::mnist(&[200], &[0.0]).is_err());
    }

    #[test]
    fn hidden_delta_examples() {
        let params = DeviceParams::symmetric(0.0, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xbar = Crossbar::init(5, 3, params, InitScheme::LowConductance, &mut rng);
        let delta_next = [0.4, -0.2, 0.7];
        let d = hidden_delta(&xbar, &delta_next, &[false; 4]).unwrap();
        assert_eq!(d, vec![0.0; 4]);

        let d = hidden_delta(&xbar, &[0.0, 1.0, 0.0], &[true; 4]).unwrap();
        for (i, v) in d.iter().enumerate() {
            assert_eq!(*v, xbar.read_weight(i, 1).unwrap());
        }
        assert!(hidden_delta(&xbar, &delta_next, &[true; 5]).is_err());
    }

    #[test]
    fn equal_outgoing_weights_give_exactly_zero_delta() {
        // Softmax deltas sum to zero, so a row of identical weights cancels.
        let p = softmax(&[0.3, -1.7, 2.2, 0.9, -0.4, 1.1, 0.05]);
        let delta_next = output_delta(&p, 2).unwrap();
        let raw: f64 = delta_next.iter().map(|d| -0.7 * d).sum();
        let layer = DenseLayer {
            rows: 2,
            cols: 7,
            weights: [vec![-0.7; 7], vec![-0.7, 0.2, 0.5, -0.7, 0.1, -0.7, 0.3]].concat(),
        };
        let d = hidden_delta(&layer, &delta_next, &[true]).unwrap();
        assert_eq!(d, vec![0.0]);
        assert!(raw.abs() < 1e-15);
        let layer = DenseLayer {
            rows: 2,
            cols: 7,
            weights: [vec![-0.7, 0.2, 0.5, -0.7, 0.1, -0.7, 0.3], vec![0.0; 7]].concat(),
        };
        let d = hidden_delta(&layer, &delta_next, &[true]).unwrap();
        assert!(d[0].abs() > 1e-3);
    }

    #[test]
    fn signal_rule() {
        assert_eq!(signal(0.7, -0.3), Some(Direction::Increase));
        assert_eq!(signal(0.7, 0.3), Some(Direction::Decrease));
        assert_eq!(signal(0.0, 0.3), None);
        assert_eq!(signal(0.7, 0.0), None);
    }

    #[test]
    fn inactive_inputs_emit_no_signals() {
        let net = zero_mnist_net();
        let mut trace = net.forward(&[0.0; MNIST_INPUTS]).unwrap();
        let deltas = net.backward(&trace, 2).unwrap();
        for v in trace.a.iter_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let grids = update_signals(&trace, &deltas);
        assert!(grids.iter().all(|g| g.signals.iter().all(Option::is_none)));
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.0; 10]), 0);
    }
}
