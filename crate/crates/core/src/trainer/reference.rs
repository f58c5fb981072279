//! Continuous-weight software backpropagation used as the accuracy baseline.
//!
//! Same topology, hard sigmoid and softmax/cross-entropy as the hardware
//! network, but with the true hard-sigmoid derivative `1/(2c)` and plain SGD
//! updates `dW = -lr * delta_j * a_i` after every sample.

use crate::mnist::Dataset;
use crate::network::{self, DenseLayer, ForwardTrace, NetworkError, Topology};

use super::{build_network, epoch_order, evaluate, Classifier, ExperimentConfig, MetricsRecord, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct SwNetwork {
    pub topology: Topology,
    pub layers: Vec<DenseLayer>,
}

impl SwNetwork {
    pub fn new(topology: Topology, layers: Vec<DenseLayer>) -> Result<Self, NetworkError> {
        let shapes = topology.layer_shapes();
        if shapes.len() != layers.len()
            || shapes
                .iter()
                .zip(&layers)
                .any(|(&(r, c), l)| l.rows != r || l.cols != c || l.weights.len() != r * c)
        {
            return Err(NetworkError::Topology("layer shapes do not match the topology".into()));
        }
        Ok(Self { topology, layers })
    }

    pub fn forward(&self, pixels: &[f64]) -> Result<ForwardTrace, NetworkError> {
        network::forward(&self.topology, &self.layers, pixels)
    }

    /// Deltas with the true derivative: `delta_i = f'(s_i) * sum_j w_ij delta_j`.
    pub fn deltas(&self, trace: &ForwardTrace, label: usize) -> Result<Vec<Vec<f64>>, NetworkError> {
        let depth = self.layers.len();
        let mut deltas = vec![Vec::new(); depth];
        deltas[depth - 1] = network::output_delta(&trace.p, label)?;
        for l in (0..depth - 1).rev() {
            let slope = 1.0 / (2.0 * self.topology.c[l]);
            let mut d = network::hidden_delta(&self.layers[l + 1], &deltas[l + 1], &trace.gate[l])?;
            d.iter_mut().for_each(|v| *v *= slope);
            deltas[l] = d;
        }
        Ok(deltas)
    }

    /// Cross-entropy loss of one sample.
    pub fn loss(&self, pixels: &[f64], label: usize) -> Result<f64, NetworkError> {
        let trace = self.forward(pixels)?;
        Ok(-trace.p[label].ln())
    }

    /// `dL/dW` for every layer, row-major.
    pub fn gradients(&self, pixels: &[f64], label: usize) -> Result<Vec<Vec<f64>>, NetworkError> {
        let trace = self.forward(pixels)?;
        let deltas = self.deltas(&trace, label)?;
        Ok(trace
            .a
            .iter()
            .zip(&deltas)
            .map(|(a, d)| a.iter().flat_map(|&ai| d.iter().map(move |&dj| dj * ai)).collect())
            .collect())
    }

    /// One online SGD step.
    pub fn step(&mut self, pixels: &[f64], label: usize, learning_rate: f64) -> Result<(), NetworkError> {
        let trace = self.forward(pixels)?;
        let deltas = self.deltas(&trace, label)?;
        for ((layer, a), d) in self.layers.iter_mut().zip(&trace.a).zip(&deltas) {
            let cols = layer.cols;
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let scale = learning_rate * ai;
                for (w, dj) in layer.weights[i * cols..(i + 1) * cols].iter_mut().zip(d) {
                    *w -= scale * dj;
                }
            }
        }
        Ok(())
    }
}

impl Classifier for SwNetwork {
    fn classify(&self, pixels: &[f64]) -> usize {
        network::predict(&self.topology, &self.layers, pixels).expect("network matches the dataset")
    }
}

#[derive(Debug, Clone)]
pub struct SwRun {
    pub metrics: Vec<MetricsRecord>,
    pub network: SwNetwork,
}

/// Software baseline. Initial weights are the nominal weights of the
/// hardware network built from the same config and seed.
pub fn train_reference_sw(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<SwRun, TrainError> {
    config.validate()?;
    let init = build_network(config, 0.0)?;
    let layers = init.layers.iter().map(DenseLayer::from_crossbar).collect();
    let mut net = SwNetwork::new(init.topology, layers)?;

    let mut metrics = Vec::new();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        for idx in epoch_order(train.len(), config, epoch) {
            net.step(train.image(idx), train.label(idx), config.learning_rate)?;
            iteration += 1;
            if iteration % config.eval_interval == 0 {
                metrics.push(MetricsRecord {
                    iteration,
                    accuracy: evaluate(&net, test),
                });
            }
        }
    }
    if metrics.last().map(|r| r.iteration) != Some(iteration) {
        metrics.push(MetricsRecord {
            iteration,
            accuracy: evaluate(&net, test),
        });
    }
    Ok(SwRun { metrics, network: net })
}
