//! Experiment runner: configuration parsing, parameter grids, presets and
//! metrics/curve output.
//!
//! Precedence is `defaults < preset < config file < command-line flags`.
//! Every grid cell becomes its own [`ExperimentConfig`]; cells run
//! independently on a worker pool and each writes
//! `<cell>.csv` (`iteration,accuracy`) and `<cell>.summary.json`. An
//! `index.json` lists all cells with their final-window summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::Parser;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossbar::UpdateMethod;
use crate::device::{trace_response, DeviceParams};
use crate::mnist::{Dataset, MnistError};
use crate::trainer::{
    self, calibrate_c, final_window, run_offchip_experiment, train_online, train_reference_sw, window_ending_at,
    ExperimentConfig, MetricsRecord, Mode, Summary, TrainError,
};

/// Environment variable naming a directory that holds the four MNIST files.
pub const DATA_ENV: &str = "CROSSBAR_BP_DATA";

/// Candidate hard-sigmoid half-widths of the calibration pilot.
pub const CALIBRATION_CANDIDATES: [f64; 5] = [1.0, 2.0, 5.0, 10.0, 20.0];
/// Training samples used by the calibration pilot.
pub const CALIBRATION_TRAIN: usize = 5_000;
/// The pilot scores on the last 10,000 training samples, which it never trains on.
pub const CALIBRATION_HELDOUT_START: usize = 50_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing dataset path: {0} (pass it as a flag, in [data], or set {DATA_ENV})")]
    MissingData(&'static str),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] MnistError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Named experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Device response curves only (no training).
    Fig6,
    /// beta in {0,1,2,3} x method in {a,b,c}; per-cell learning curves.
    Fig7,
    /// Same grid as `fig7`, read as final-window accuracy per cell.
    Fig8,
    /// Dynamic range n_max in {32,64,128}.
    Fig9,
    /// Mini-batch size in {1,2,5,10}.
    Fig10,
    /// Depth sweep, software reference vs. hardware (beta 0), three epochs.
    Fig12,
    /// Device variation sigma in {0,0.5,1}, on-chip vs. off-chip.
    Fig14,
    /// Pilot sweep choosing the default hard-sigmoid half-width.
    CalibrateC,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Fig6,
        Preset::Fig7,
        Preset::Fig8,
        Preset::Fig9,
        Preset::Fig10,
        Preset::Fig12,
        Preset::Fig14,
        Preset::CalibrateC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Fig6 => "fig6",
            Preset::Fig7 => "fig7",
            Preset::Fig8 => "fig8",
            Preset::Fig9 => "fig9",
            Preset::Fig10 => "fig10",
            Preset::Fig12 => "fig12",
            Preset::Fig14 => "fig14",
            Preset::CalibrateC => "calibrate-c",
        }
    }

    /// Whether the preset trains networks (and therefore needs MNIST).
    pub fn needs_data(self) -> bool {
        self != Preset::Fig6
    }

    /// Grid axes of the preset.
    pub fn axes(self) -> GridAxes {
        let mut axes = GridAxes::default();
        match self {
            Preset::Fig6 | Preset::CalibrateC => {}
            Preset::Fig7 | Preset::Fig8 => {
                axes.beta = Some(vec![0.0, 1.0, 2.0, 3.0]);
                axes.method = Some(UpdateMethod::ALL.to_vec());
            }
            Preset::Fig9 => axes.n_max = Some(vec![32, 64, 128]),
            Preset::Fig10 => axes.batch_size = Some(vec![1, 2, 5, 10]),
            Preset::Fig12 => {
                axes.beta = Some(vec![0.0]);
                axes.mode = Some(vec![Mode::SwReference, Mode::HwOnchip]);
                axes.hidden = Some(vec![vec![200], vec![300, 100], vec![400, 200, 100]]);
                axes.epochs = Some(vec![3]);
            }
            Preset::Fig14 => {
                axes.sigma = Some(vec![0.0, 0.5, 1.0]);
                axes.mode = Some(vec![Mode::HwOnchip, Mode::HwOffchip]);
            }
        }
        axes
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown preset '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// Axes of a parameter grid. `None` means "the base config's value only".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub beta: Option<Vec<f64>>,
    pub n_max: Option<Vec<u32>>,
    pub method: Option<Vec<UpdateMethod>>,
    pub batch_size: Option<Vec<usize>>,
    pub sigma: Option<Vec<f64>>,
    pub mode: Option<Vec<Mode>>,
    pub hidden: Option<Vec<Vec<usize>>>,
    pub epochs: Option<Vec<usize>>,
}

impl GridAxes {
    /// Axes set in `other` replace the ones here.
    fn overlay(&mut self, other: GridAxes) {
        macro_rules! take {
            ($($f:ident),*) => {$( if other.$f.is_some() { self.$f = other.$f; } )*};
        }
        take!(beta, n_max, method, batch_size, sigma, mode, hidden, epochs);
    }

    /// Cartesian product over `base`. When `hidden` varies, per-layer `c`
    /// values are reset to the default so every cell stays consistent.
    pub fn expand(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        fn one<T: Clone>(axis: &Option<Vec<T>>, base: T) -> Vec<T> {
            axis.clone().unwrap_or_else(|| vec![base])
        }
        let mut cells = Vec::new();
        for hidden in self.hidden.clone().unwrap_or_else(|| vec![base.hidden.clone()]) {
            for mode in one(&self.mode, base.mode) {
                for beta in one(&self.beta, base.beta) {
                    for n_max in one(&self.n_max, base.n_max) {
                        for method in one(&self.method, base.method) {
                            for batch_size in one(&self.batch_size, base.batch_size) {
                                for sigma in one(&self.sigma, base.sigma) {
                                    for epochs in one(&self.epochs, base.epochs) {
                                        let c = if hidden.len() == base.c.len() {
                                            base.c.clone()
                                        } else {
                                            Vec::new()
                                        };
                                        cells.push(
                                            ExperimentConfig {
                                                beta,
                                                n_max,
                                                method,
                                                batch_size,
                                                sigma,
                                                mode,
                                                hidden: hidden.clone(),
                                                epochs,
                                                c,
                                                ..base.clone()
                                            }
                                            .resolved(),
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

/// The four MNIST files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    /// Standard file names inside `dir`; a `.gz` variant is used when only
    /// the compressed file exists.
    pub fn in_dir(dir: &Path) -> Self {
        let pick = |name: &str| {
            let plain = dir.join(name);
            let gz = dir.join(format!("{name}.gz"));
            if !plain.exists() && gz.exists() {
                gz
            } else {
                plain
            }
        };
        Self {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset), MnistError> {
        let train = Dataset::load(&self.train_images, &self.train_labels)?;
        let test = Dataset::load(&self.test_images, &self.test_labels)?;
        Ok((train, test))
    }
}

/// Command-line interface.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "crossbar-bp", version, allow_negative_numbers = true, about = "Sign-only backpropagation on simulated synapse crossbars")]
pub struct Cli {
    /// TOML config file ([experiment], [grid], [data], [output] tables).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named grid: fig6, fig7, fig8, fig9, fig10, fig12, fig14, calibrate-c.
    #[arg(long)]
    pub preset: Option<String>,
    /// Device nonlinearity; a comma list makes it a grid axis.
    #[arg(long)]
    pub beta: Option<String>,
    /// Pulses spanning the conductance range; comma list allowed.
    #[arg(long)]
    pub nmax: Option<String>,
    /// Saturation method a, b or c; comma list allowed.
    #[arg(long)]
    pub method: Option<String>,
    /// Mini-batch size; comma list allowed.
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Device variation standard deviation; comma list allowed.
    #[arg(long)]
    pub sigma: Option<String>,
    /// onchip, offchip or sw; comma list allowed.
    #[arg(long)]
    pub mode: Option<String>,
    /// Hidden layer sizes, e.g. 300,100.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training samples between test-set evaluations.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Hard-sigmoid half-width per hidden layer, e.g. 1,1.
    #[arg(long)]
    pub c: Option<String>,
    /// Learning rate of the software reference.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Shuffle samples every epoch (seeded).
    #[arg(long)]
    pub shuffle: bool,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Off-chip transfer repeats.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    #[serde(default)]
    experiment: Option<toml::Table>,
    #[serde(default)]
    grid: Option<GridAxes>,
    #[serde(default)]
    data: Option<FileData>,
    #[serde(default)]
    output: Option<FileOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileData {
    dir: Option<PathBuf>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOutput {
    dir: Option<PathBuf>,
    jobs: Option<usize>,
}

/// Everything needed to execute one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    /// Base config every grid cell is derived from.
    pub config: ExperimentConfig,
    /// `None` only for presets that do not train.
    pub data: Option<DataPaths>,
    pub out: PathBuf,
    pub axes: GridAxes,
    pub repeats: usize,
    pub jobs: usize,
    pub preset: Option<Preset>,
}

impl RunManifest {
    /// Expanded, validated grid cells.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        self.axes.expand(&self.config)
    }
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, _> = raw.split(',').map(|s| s.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        Ok(_) => Err(invalid(key, "empty list")),
        Err(e) => Err(invalid(key, format!("cannot parse '{raw}': {e}"))),
    }
}

/// Sets a scalar field when the flag has one value, a grid axis otherwise.
fn scalar_or_axis<T: FromStr + Clone>(
    key: &str,
    raw: &Option<String>,
    field: &mut T,
    axis: &mut Option<Vec<T>>,
) -> Result<(), ConfigError>
where
    T::Err: std::fmt::Display,
{
    if let Some(raw) = raw {
        let values = parse_list::<T>(key, raw)?;
        if values.len() == 1 {
            *field = values[0].clone();
            *axis = None;
        } else {
            *axis = Some(values);
        }
    }
    Ok(())
}

/// Resolves flags, an optional config file and the environment into a
/// manifest. `data_env` is the value of [`DATA_ENV`], passed in so callers
/// (and tests) control the environment.
pub fn parse_config(cli: &Cli, data_env: Option<PathBuf>) -> Result<RunManifest, ConfigError> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.clone(),
                source,
            })?;
            toml::from_str::<FileConfig>(&text).map_err(|e| ConfigError::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?
        }
        None => FileConfig::default(),
    };

    let preset = match cli.preset.as_ref().or(file.preset.as_ref()) {
        Some(name) => Some(name.parse::<Preset>().map_err(|e| invalid("preset", e))?),
        None => None,
    };
    let mut axes = preset.map(Preset::axes).unwrap_or_default();
    if let Some(grid) = file.grid {
        axes.overlay(grid);
    }

    let mut config = match file.experiment {
        Some(table) => {
            let path = cli.config.clone().unwrap_or_default();
            toml::Value::Table(table).try_into::<ExperimentConfig>().map_err(|e| ConfigError::Parse {
                path,
                message: format!("[experiment]: {e}"),
            })?
        }
        None => ExperimentConfig::default(),
    };

    scalar_or_axis("beta", &cli.beta, &mut config.beta, &mut axes.beta)?;
    scalar_or_axis("nmax", &cli.nmax, &mut config.n_max, &mut axes.n_max)?;
    if let Some(raw) = &cli.method {
        // Method parsing carries its own message for the reset rule "d".
        for m in raw.split(',') {
            m.trim().parse::<UpdateMethod>().map_err(|e| invalid("method", e.to_string()))?;
        }
    }
    scalar_or_axis("method", &cli.method, &mut config.method, &mut axes.method)?;
    scalar_or_axis("batch-size", &cli.batch_size, &mut config.batch_size, &mut axes.batch_size)?;
    scalar_or_axis("sigma", &cli.sigma, &mut config.sigma, &mut axes.sigma)?;
    scalar_or_axis("mode", &cli.mode, &mut config.mode, &mut axes.mode)?;
    if let Some(raw) = &cli.hidden {
        config.hidden = parse_list("hidden", raw)?;
        axes.hidden = None;
    }
    if let Some(raw) = &cli.c {
        config.c = parse_list("c", raw)?;
    }
    if let Some(v) = cli.epochs {
        config.epochs = v;
        axes.epochs = None;
    }
    if let Some(v) = cli.seed {
        config.seed = v;
    }
    if let Some(v) = cli.eval_interval {
        config.eval_interval = v;
    }
    if let Some(v) = cli.lr {
        config.learning_rate = v;
    }
    if cli.shuffle {
        config.shuffle = true;
    }
    if let Some(v) = cli.repeats {
        config.repeats = v;
    }
    if !config.c.is_empty() && config.c.len() != config.hidden.len() {
        return Err(invalid(
            "c",
            format!("{} values for {} hidden layers", config.c.len(), config.hidden.len()),
        ));
    }
    let config = config.resolved();

    let manifest_axes = axes;
    for cell in manifest_axes.expand(&config) {
        cell.validate().map_err(|e| match e {
            TrainError::Config(msg) => invalid(&msg.split_whitespace().next().unwrap_or("config").to_string(), msg),
            other => invalid("config", other.to_string()),
        })?;
        cell.device_params().map_err(|e| invalid("beta/nmax", e.to_string()))?;
    }

    let file_data = file.data.unwrap_or_default();
    let file_output = file.output.unwrap_or_default();
    let needs_data = preset.is_none_or(Preset::needs_data);
    let data = if needs_data {
        let dir = file_data.dir.clone().or(data_env);
        let defaults = dir.as_deref().map(DataPaths::in_dir);
        let pick = |flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &'static str, default: Option<&PathBuf>| {
            flag.clone()
                .or_else(|| file.clone())
                .or_else(|| default.cloned())
                .ok_or(ConfigError::MissingData(name))
        };
        Some(DataPaths {
            train_images: pick(
                &cli.train_images,
                &file_data.train_images,
                "train-images",
                defaults.as_ref().map(|d| &d.train_images),
            )?,
            train_labels: pick(
                &cli.train_labels,
                &file_data.train_labels,
                "train-labels",
                defaults.as_ref().map(|d| &d.train_labels),
            )?,
            test_images: pick(
                &cli.test_images,
                &file_data.test_images,
                "test-images",
                defaults.as_ref().map(|d| &d.test_images),
            )?,
            test_labels: pick(
                &cli.test_labels,
                &file_data.test_labels,
                "test-labels",
                defaults.as_ref().map(|d| &d.test_labels),
            )?,
        })
    } else {
        None
    };

    let jobs = cli
        .jobs
        .or(file_output.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if jobs == 0 {
        return Err(invalid("jobs", "must be at least 1"));
    }
    let repeats = config.repeats;
    Ok(RunManifest {
        config,
        data,
        out: cli.out.clone().or(file_output.dir).unwrap_or_else(|| PathBuf::from("results")),
        axes: manifest_axes,
        repeats,
        jobs,
        preset,
    })
}

/// File stem identifying a grid cell by its parameters.
pub fn cell_name(config: &ExperimentConfig) -> String {
    let hidden: Vec<String> = config.hidden.iter().map(|h| h.to_string()).collect();
    format!(
        "{}_beta{}_nmax{}_method{}_batch{}_sigma{}_hidden{}_epochs{}_seed{}",
        config.mode.as_str(),
        config.beta,
        config.n_max,
        config.method,
        config.batch_size,
        config.sigma,
        hidden.join("-"),
        config.epochs,
        config.seed
    )
}

/// Final-window summary at the end of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochWindow {
    pub epoch: usize,
    pub iteration: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Off-chip transfer results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Contents of `<cell>.summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_final_window: f64,
    pub min_final_window: f64,
    pub max_final_window: f64,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    /// Final-window summaries ending at each epoch boundary.
    pub epochs: Vec<EpochWindow>,
    /// Present for off-chip cells; the training curve above is the ideal run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSummary>,
}

/// Result of running one cell in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub transfer: Option<Vec<f64>>,
}

/// Trains one cell according to its mode.
pub fn run_cell(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<CellOutcome, TrainError> {
    match config.mode {
        Mode::HwOnchip => Ok(CellOutcome {
            metrics: train_online(config, train, test)?.metrics,
            transfer: None,
        }),
        Mode::HwOffchip => {
            let r = run_offchip_experiment(config, train, test)?;
            Ok(CellOutcome {
                metrics: r.ideal.metrics,
                transfer: Some(r.accuracies),
            })
        }
        Mode::SwReference => Ok(CellOutcome {
            metrics: train_reference_sw(config, train, test)?.metrics,
            transfer: None,
        }),
    }
}

/// Builds the summary of a finished cell.
pub fn summarize(
    config: &ExperimentConfig,
    outcome: &CellOutcome,
    samples_per_epoch: usize,
    wall_clock_seconds: f64,
) -> Option<RunSummary> {
    let window = final_window(&outcome.metrics, config.summary_window)?;
    let epochs = (1..=config.epochs)
        .filter_map(|epoch| {
            let iteration = epoch * samples_per_epoch;
            window_ending_at(&outcome.metrics, iteration, config.summary_window).map(|s| EpochWindow {
                epoch,
                iteration,
                mean: s.mean,
                min: s.min,
                max: s.max,
            })
        })
        .collect();
    let transfer = outcome.transfer.as_ref().and_then(|acc| {
        Summary::of(acc).map(|s| TransferSummary {
            accuracies: acc.clone(),
            mean: s.mean,
            min: s.min,
            max: s.max,
        })
    });
    Some(RunSummary {
        mean_final_window: window.mean,
        min_final_window: window.min,
        max_final_window: window.max,
        config: config.clone(),
        seed: config.seed,
        wall_clock_seconds,
        epochs,
        transfer,
    })
}

/// Writes `contents` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let io = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// CSV with header `iteration,accuracy`, one row per checkpoint.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("iteration,accuracy\n");
    for r in records {
        writeln!(out, "{},{}", r.iteration, r.accuracy).expect("write to string");
    }
    out
}

/// Parses a metrics CSV written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Option<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next()? != "iteration,accuracy" {
        return None;
    }
    lines
        .map(|l| {
            let (i, a) = l.split_once(',')?;
            Some(MetricsRecord {
                iteration: i.parse().ok()?,
                accuracy: a.parse().ok()?,
            })
        })
        .collect()
}

/// Writes `<stem>.csv` and `<stem>.summary.json` into `dir`.
pub fn emit_metrics(dir: &Path, stem: &str, records: &[MetricsRecord], summary: &RunSummary) -> Result<(), RunError> {
    write_atomic(&dir.join(format!("{stem}.csv")), metrics_csv(records).as_bytes())?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_atomic(&dir.join(format!("{stem}.summary.json")), json.as_bytes())
}

/// Device response table: `pulse_index`, then `potentiation_beta<b>` and
/// `depression_beta<b>` per beta. Conductances are normalized to `[0, 1]`;
/// row 0 is the starting state.
pub fn device_curves_csv(betas: &[f64], n_max: u32) -> Result<String, crate::device::DeviceError> {
    let mut columns = Vec::new();
    for &beta in betas {
        let params = DeviceParams::symmetric(beta, n_max)?;
        let trace = trace_response(&params, n_max as usize);
        let norm = |g: f64| (g - params.g_min) / params.range();
        let mut pot = vec![0.0];
        pot.extend(trace.potentiation.iter().map(|&g| norm(g)));
        let mut dep = vec![1.0];
        dep.extend(trace.depression.iter().map(|&g| norm(g)));
        columns.push((beta, pot, dep));
    }
    let mut out = String::from("pulse_index");
    for (beta, _, _) in &columns {
        write!(out, ",potentiation_beta{beta},depression_beta{beta}").expect("write to string");
    }
    out.push('\n');
    for k in 0..=n_max as usize {
        write!(out, "{k}").expect("write to string");
        for (_, pot, dep) in &columns {
            write!(out, ",{},{}", pot[k], dep[k]).expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_device_curves(path: &Path, betas: &[f64], n_max: u32) -> Result<(), RunError> {
    let csv = device_curves_csv(betas, n_max).map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()),
    })?;
    write_atomic(path, csv.as_bytes())
}

/// One line of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_final_window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_final_window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_final_window: Option<f64>,
    /// Mean transfer accuracy of off-chip cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_mean: Option<f64>,
}

impl IndexEntry {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub preset: Option<Preset>,
    pub cells: Vec<IndexEntry>,
}

impl GridReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(IndexEntry::ok)
    }
}

fn run_one(config: &ExperimentConfig, train: &Dataset, test: &Dataset, out: &Path) -> IndexEntry {
    let name = cell_name(config);
    let failed = |error: String| IndexEntry {
        name: name.clone(),
        status: "failed".into(),
        error: Some(error),
        mean_final_window: None,
        min_final_window: None,
        max_final_window: None,
        transfer_mean: None,
    };
    let start = Instant::now();
    let outcome = match run_cell(config, train, test) {
        Ok(o) => o,
        Err(e) => return failed(e.to_string()),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let Some(summary) = summarize(config, &outcome, train.len(), elapsed) else {
        return failed("no checkpoints recorded".into());
    };
    if let Err(e) = emit_metrics(out, &name, &outcome.metrics, &summary) {
        return failed(e.to_string());
    }
    IndexEntry {
        name,
        status: "ok".into(),
        error: None,
        mean_final_window: Some(summary.mean_final_window),
        min_final_window: Some(summary.min_final_window),
        max_final_window: Some(summary.max_final_window),
        transfer_mean: summary.transfer.map(|t| t.mean),
    }
}

/// Runs every cell of `cells` on `jobs` workers, writing per-cell files and
/// `index.json` into `out`. Cell failures are recorded, not propagated.
pub fn run_cells(
    cells: &[ExperimentConfig],
    train: &Dataset,
    test: &Dataset,
    out: &Path,
    jobs: usize,
    preset: Option<Preset>,
) -> Result<GridReport, RunError> {
    fs::create_dir_all(out).map_err(|source| RunError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let entries: Vec<IndexEntry> = pool.install(|| cells.par_iter().map(|c| run_one(c, train, test, out)).collect());
    let report = GridReport { preset, cells: entries };
    let json = serde_json::to_string_pretty(&report).expect("index serializes");
    write_atomic(&out.join("index.json"), json.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub candidates: Vec<(f64, f64)>,
    pub chosen: f64,
    pub train_samples: usize,
    pub heldout_samples: usize,
}

/// Pilot sweep: trains on the first [`CALIBRATION_TRAIN`] samples with each
/// candidate `c` and scores on the held-out tail of the training set.
pub fn run_calibration(base: &ExperimentConfig, train: &Dataset) -> Result<CalibrationReport, TrainError> {
    let subset = train.slice(0, CALIBRATION_TRAIN.min(train.len()));
    let heldout = train.slice(CALIBRATION_HELDOUT_START.min(train.len()), train.len());
    let candidates = calibrate_c(base, &CALIBRATION_CANDIDATES, &subset, &heldout)?;
    // Highest accuracy wins; ties go to the smaller c.
    let chosen = candidates
        .iter()
        .fold(None::<(f64, f64)>, |best, &(c, a)| match best {
            Some((_, ba)) if ba >= a => best,
            _ => Some((c, a)),
        })
        .map(|(c, _)| c)
        .unwrap_or(trainer::DEFAULT_C);
    Ok(CalibrationReport {
        candidates,
        chosen,
        train_samples: subset.len(),
        heldout_samples: heldout.len(),
    })
}

/// Executes a manifest. Returns the grid report (empty for curve-only runs).
pub fn run_grid(manifest: &RunManifest) -> Result<GridReport, RunError> {
    let out = &manifest.out;
    fs::create_dir_all(out).map_err(|source| RunError::Io {
        path: out.clone(),
        source,
    })?;
    if manifest.preset == Some(Preset::Fig6) {
        let n_max = manifest.config.n_max;
        emit_device_curves(&out.join("device_curves.csv"), &[0.0, 1.0, 2.0, 3.0], n_max)?;
        return Ok(GridReport {
            preset: manifest.preset,
            cells: Vec::new(),
        });
    }
    let data = manifest.data.as_ref().expect("training manifests carry data paths");
    let (train, test) = data.load()?;
    if manifest.preset == Some(Preset::CalibrateC) {
        let entry = match run_calibration(&manifest.config, &train) {
            Ok(report) => {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                write_atomic(&out.join("calibrate_c.json"), json.as_bytes())?;
                IndexEntry {
                    name: "calibrate_c".into(),
                    status: "ok".into(),
                    error: None,
                    mean_final_window: None,
                    min_final_window: None,
                    max_final_window: None,
                    transfer_mean: None,
                }
            }
            Err(e) => IndexEntry {
                name: "calibrate_c".into(),
                status: "failed".into(),
                error: Some(e.to_string()),
                mean_final_window: None,
                min_final_window: None,
                max_final_window: None,
                transfer_mean: None,
            },
        };
        return Ok(GridReport {
            preset: manifest.preset,
            cells: vec![entry],
        });
    }
    run_cells(&manifest.cells(), &train, &test, out, manifest.jobs, manifest.preset)
}
