//! Simulation of multilayer perceptrons trained in-situ on crossbars of
//! nonlinear, saturating conductance devices.
//!
//! Weights are differential pairs `G+ - G-`. Training uses backpropagation
//! reduced to what the array can do on its own: transposed read-out for the
//! backward pass, a 0/1 activation derivative, and one conductance pulse per
//! synapse per update in the direction of `-sgn(delta)`.

pub mod crossbar;
pub mod device;
pub mod experiment;
pub mod mnist;
pub mod network;
pub mod trainer;

pub use crossbar::{ConductancePair, Crossbar, Direction, InitScheme, UpdateMethod};
pub use device::{DeviceParams, VariationFactor};
pub use mnist::Dataset;
pub use network::{CrossbarNetwork, ForwardTrace, Topology};
pub use trainer::{ExperimentConfig, MetricsRecord, Mode, Summary};
