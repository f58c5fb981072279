//! Training loops and the experiments built on them.
//!
//! Hardware training is online: every sample yields one vote per synapse
//! (`+1` increase, `-1` decrease, `0` none). At the end of each mini-batch a
//! synapse receives at most one update, in the direction of its summed vote.

mod reference;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossbar::{CrossbarError, Direction, InitScheme, UpdateMethod};
use crate::device::{DeviceError, DeviceParams};
use crate::mnist::Dataset;
use crate::network::{CrossbarNetwork, ForwardTrace, NetworkError, Topology};

pub use reference::{train_reference_sw, SwNetwork, SwRun};

/// Hard-sigmoid half-width used when a config leaves `c` empty. Picked by
/// the pilot sweep in [`calibrate_c`] (see README).
pub const DEFAULT_C: f64 = 1.0;

const INIT_STREAM: u64 = 0;
const VARIATION_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const TRANSFER_STREAM_BASE: u64 = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Crossbar(#[from] CrossbarError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "onchip")]
    HwOnchip,
    #[serde(rename = "offchip")]
    HwOffchip,
    #[serde(rename = "sw")]
    SwReference,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::HwOnchip => "onchip",
            Mode::HwOffchip => "offchip",
            Mode::SwReference => "sw",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "onchip" | "hw_onchip" => Ok(Mode::HwOnchip),
            "offchip" | "hw_offchip" => Ok(Mode::HwOffchip),
            "sw" | "sw_reference" => Ok(Mode::SwReference),
            other => Err(format!("unknown mode '{other}' (expected onchip, offchip or sw)")),
        }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub beta: f64,
    pub n_max: u32,
    pub method: UpdateMethod,
    pub batch_size: usize,
    pub sigma: f64,
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub eval_interval: usize,
    /// Per hidden layer; empty means `DEFAULT_C` everywhere.
    pub c: Vec<f64>,
    /// Software reference only.
    pub learning_rate: f64,
    pub shuffle: bool,
    pub init: InitScheme,
    /// Number of trailing checkpoints summarized as the final window.
    pub summary_window: usize,
    /// Off-chip transfer repeats.
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            n_max: 64,
            method: UpdateMethod::B,
            batch_size: 1,
            sigma: 0.0,
            mode: Mode::HwOnchip,
            hidden: vec![200],
            epochs: 1,
            seed: 1,
            eval_interval: 600,
            c: Vec::new(),
            learning_rate: 0.01,
            shuffle: false,
            init: InitScheme::LowConductance,
            summary_window: 10,
            repeats: 10,
        }
    }
}

impl ExperimentConfig {
    /// Fills in defaults that depend on other fields (currently `c`).
    pub fn resolved(mut self) -> Self {
        if self.c.is_empty() {
            self.c = vec![DEFAULT_C; self.hidden.len()];
        }
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be a non-negative number, got {}", self.beta));
        }
        if self.n_max < 2 {
            return bad(format!("n_max must be at least 2, got {}", self.n_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden must list at least one positive layer size".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if !self.c.is_empty() && self.c.len() != self.hidden.len() {
            return bad(format!(
                "c has {} values for {} hidden layers",
                self.c.len(),
                self.hidden.len()
            ));
        }
        if self.c.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return bad("c values must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative".into());
        }
        if self.mode == Mode::SwReference && self.batch_size != 1 {
            return bad("the software reference trains online (batch_size 1)".into());
        }
        if self.summary_window == 0 {
            return bad("summary_window must be at least 1".into());
        }
        if self.mode == Mode::HwOffchip && self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        Ok(())
    }

    pub fn device_params(&self) -> Result<DeviceParams, TrainError> {
        Ok(DeviceParams::symmetric(self.beta, self.n_max)?)
    }

    pub fn topology(&self) -> Result<Topology, TrainError> {
        let resolved = self.clone().resolved();
        Ok(Topology::mnist(&resolved.hidden, &resolved.c)?)
    }
}

/// Seeded random stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self { mean, min, max })
    }
}

/// Summary of the last `window` records.
pub fn final_window(records: &[MetricsRecord], window: usize) -> Option<Summary> {
    let start = records.len().saturating_sub(window);
    let acc: Vec<f64> = records[start..].iter().map(|r| r.accuracy).collect();
    Summary::of(&acc)
}

/// Summary of the last `window` records at or before `iteration`.
pub fn window_ending_at(records: &[MetricsRecord], iteration: usize, window: usize) -> Option<Summary> {
    let end = records.partition_point(|r| r.iteration <= iteration);
    final_window(&records[..end], window)
}

/// Something that assigns a class to an image.
pub trait Classifier {
    fn classify(&self, pixels: &[f64]) -> usize;
}

impl Classifier for CrossbarNetwork {
    fn classify(&self, pixels: &[f64]) -> usize {
        self.predict(pixels).expect("network matches the dataset")
    }
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate<C: Classifier + Sync + ?Sized>(model: &C, test: &Dataset) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let correct: usize = (0..test.len())
        .into_par_iter()
        .with_min_len(256)
        .filter(|&i| model.classify(test.image(i)) == test.label(i))
        .count();
    correct as f64 / test.len() as f64
}

/// Mini-batch state of the hardware training loop.
#[derive(Debug, Clone)]
pub struct HwTrainer {
    network: CrossbarNetwork,
    method: UpdateMethod,
    batch_size: usize,
    votes: Vec<Vec<i32>>,
    dirty_rows: Vec<Vec<bool>>,
    pending: usize,
}

impl HwTrainer {
    pub fn new(network: CrossbarNetwork, method: UpdateMethod, batch_size: usize) -> Self {
        let votes = network
            .layers
            .iter()
            .map(|l| vec![0; l.rows() * l.cols()])
            .collect();
        let dirty_rows = network.layers.iter().map(|l| vec![false; l.rows()]).collect();
        Self {
            network,
            method,
            batch_size: batch_size.max(1),
            votes,
            dirty_rows,
            pending: 0,
        }
    }

    pub fn network(&self) -> &CrossbarNetwork {
        &self.network
    }

    pub fn into_network(self) -> CrossbarNetwork {
        self.network
    }

    /// Forward and backward pass for one sample; adds its votes. Returns the
    /// number of synapse updates applied if this sample closed a batch.
    pub fn observe(&mut self, pixels: &[f64], label: usize) -> Result<Option<usize>, TrainError> {
        let trace = self.network.forward(pixels)?;
        let deltas = self.network.backward(&trace, label)?;
        self.accumulate(&trace, &deltas.delta);
        self.pending += 1;
        if self.pending == self.batch_size {
            Ok(Some(self.flush()))
        } else {
            Ok(None)
        }
    }

    fn accumulate(&mut self, trace: &ForwardTrace, deltas: &[Vec<f64>]) {
        for (l, (a, d)) in trace.a.iter().zip(deltas).enumerate() {
            // Vote of every post-neuron: -sgn(delta).
            let col_vote: Vec<i32> = d
                .iter()
                .map(|&dj| match crate::network::signal(1.0, dj) {
                    Some(Direction::Increase) => 1,
                    Some(Direction::Decrease) => -1,
                    None => 0,
                })
                .collect();
            if col_vote.iter().all(|v| *v == 0) {
                continue;
            }
            let cols = d.len();
            let votes = &mut self.votes[l];
            let dirty = &mut self.dirty_rows[l];
            for (i, &ai) in a.iter().enumerate() {
                if ai <= 0.0 {
                    continue;
                }
                dirty[i] = true;
                for (v, cv) in votes[i * cols..(i + 1) * cols].iter_mut().zip(&col_vote) {
                    *v += cv;
                }
            }
        }
    }

    /// Applies all pending votes, one update per synapse with a nonzero vote.
    pub fn flush(&mut self) -> usize {
        let mut applied = 0;
        for (l, layer) in self.network.layers.iter_mut().enumerate() {
            let cols = layer.cols();
            let votes = &mut self.votes[l];
            for (i, dirty) in self.dirty_rows[l].iter_mut().enumerate() {
                if !*dirty {
                    continue;
                }
                *dirty = false;
                for j in 0..cols {
                    let idx = i * cols + j;
                    let vote = std::mem::take(&mut votes[idx]);
                    if vote != 0 {
                        let dir = if vote > 0 {
                            Direction::Increase
                        } else {
                            Direction::Decrease
                        };
                        layer.update_at(idx, dir, self.method);
                        applied += 1;
                    }
                }
            }
        }
        self.pending = 0;
        applied
    }
}

/// Output of a hardware training run.
#[derive(Debug, Clone)]
pub struct HwRun {
    pub metrics: Vec<MetricsRecord>,
    pub network: CrossbarNetwork,
}

/// Sample order of one epoch.
pub(crate) fn epoch_order(len: usize, config: &ExperimentConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if config.shuffle {
        let mut rng = rng_stream(config.seed.wrapping_add(epoch as u64), SHUFFLE_STREAM);
        order.shuffle(&mut rng);
    }
    order
}

/// Builds the initial (optionally varied) crossbar network for `config`.
pub fn build_network(config: &ExperimentConfig, sigma: f64) -> Result<CrossbarNetwork, TrainError> {
    let params = config.device_params()?;
    let topology = config.topology()?;
    let mut net = CrossbarNetwork::new(
        topology,
        params,
        config.init,
        &mut rng_stream(config.seed, INIT_STREAM),
    );
    if sigma > 0.0 {
        net.sample_variation(sigma, &mut rng_stream(config.seed, VARIATION_STREAM));
    }
    Ok(net)
}

/// Hardware training with the sign-only rule. Variation factors are sampled
/// once (from `config.sigma`) before training, so the loop learns through
/// the varied read-out.
pub fn train_online(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<HwRun, TrainError> {
    config.validate()?;
    let network = build_network(config, config.sigma)?;
    train_network(network, config, train, test)
}

/// Continues hardware training of an existing network.
pub fn train_network(
    network: CrossbarNetwork,
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<HwRun, TrainError> {
    config.validate()?;
    let mut trainer = HwTrainer::new(network, config.method, config.batch_size);
    let mut metrics = Vec::new();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        for idx in epoch_order(train.len(), config, epoch) {
            trainer.observe(train.image(idx), train.label(idx))?;
            iteration += 1;
            if iteration % config.eval_interval == 0 {
                metrics.push(MetricsRecord {
                    iteration,
                    accuracy: evaluate(trainer.network(), test),
                });
            }
        }
    }
    trainer.flush();
    if metrics.last().map(|r| r.iteration) != Some(iteration) {
        metrics.push(MetricsRecord {
            iteration,
            accuracy: evaluate(trainer.network(), test),
        });
    }
    Ok(HwRun {
        metrics,
        network: trainer.into_network(),
    })
}

/// On-chip learning: identical to [`train_online`], which already trains on
/// the varied array.
pub fn run_onchip_experiment(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<HwRun, TrainError> {
    train_online(config, train, test)
}

#[derive(Debug, Clone)]
pub struct OffchipResult {
    /// Training run on ideal devices.
    pub ideal: HwRun,
    /// Test accuracy of each transferred copy.
    pub accuracies: Vec<f64>,
    pub summary: Summary,
}

/// Off-chip learning: train on ideal devices, then transfer the weights onto
/// `config.repeats` freshly varied arrays and evaluate each.
pub fn run_offchip_experiment(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<OffchipResult, TrainError> {
    let ideal_config = ExperimentConfig {
        sigma: 0.0,
        ..config.clone()
    };
    let ideal = train_online(&ideal_config, train, test)?;
    let accuracies = transfer_accuracies(&ideal.network, config, test)?;
    let summary = Summary::of(&accuracies).expect("repeats >= 1");
    Ok(OffchipResult {
        ideal,
        accuracies,
        summary,
    })
}

/// Programs the ideal network's weights onto `config.repeats` varied arrays
/// (variation `config.sigma`) and returns each copy's test accuracy.
pub fn transfer_accuracies(
    ideal: &CrossbarNetwork,
    config: &ExperimentConfig,
    test: &Dataset,
) -> Result<Vec<f64>, TrainError> {
    let targets = ideal.nominal_weights();
    (0..config.repeats.max(1))
        .map(|r| {
            let mut copy = ideal.clone();
            let mut rng = rng_stream(config.seed, TRANSFER_STREAM_BASE + r as u64);
            copy.sample_variation(config.sigma, &mut rng);
            for (layer, target) in copy.layers.iter_mut().zip(&targets) {
                layer.program_weights(target)?;
            }
            Ok(evaluate(&copy, test))
        })
        .collect()
}

/// Pilot sweep of a shared hard-sigmoid half-width: trains on `train` with
/// each candidate and reports held-out accuracy at the end.
pub fn calibrate_c(
    base: &ExperimentConfig,
    candidates: &[f64],
    train: &Dataset,
    heldout: &Dataset,
) -> Result<Vec<(f64, f64)>, TrainError> {
    candidates
        .iter()
        .map(|&c| {
            let config = ExperimentConfig {
                c: vec![c; base.hidden.len()],
                eval_interval: train.len().max(1),
                ..base.clone()
            };
            let accuracy = match config.mode {
                Mode::SwReference => {
                    train_reference_sw(&config, train, heldout)?
                        .metrics
                        .last()
                        .map(|r| r.accuracy)
                        .unwrap_or(0.0)
                }
                _ => train_online(&config, train, heldout)?
                    .metrics
                    .last()
                    .map(|r| r.accuracy)
                    .unwrap_or(0.0),
            };
            Ok((c, accuracy))
        })
        .collect()
}
