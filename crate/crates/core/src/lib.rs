//! Dale-constrained spiking networks trained by random error backpropagation
//! carried through cortical microcircuits.
//!
//! ## Structure
//!
//! - [`neuron`]: discrete-time LIF membrane, PSC filtering, surrogate slope and
//!   the apical-modulated backward PSC
//! - [`dale`]: non-negative weight matrices tagged with presynaptic sign,
//!   initialization, projection and dual-sum normalization
//! - [`microcircuits`]: the Pyr–SOM excitatory backward circuit, the three
//!   inhibitory backward circuits and assembly competition
//! - [`network`]: layer assembly, forward path, error injection, backward
//!   routing and trial simulation
//! - [`learning`]: basal Hebbian / apical anti-Hebbian plasticity, AdamW and
//!   batch application
//! - [`checkpoint`]: binary checkpoint container
//!
//! All state is `f64`. Population state is stored as `trials × neurons`
//! matrices so a mini-batch runs as a single simulation; a single trial is a
//! one-row matrix.

pub mod checkpoint;
pub mod dale;
pub mod error;
pub mod learning;
pub mod microcircuits;
pub mod network;
pub mod neuron;
pub mod rng;

pub use dale::{DaleMatrix, InitVariant, PreSign};
pub use error::{Error, Result};
pub use learning::{AdamWConfig, BatchStats, OptimizerKind, OptimizerState, PlasticityAccumulator};
pub use network::{BackwardMode, InhVariant, Network, NetworkConfig, TrialTrace};
pub use neuron::{CellKind, CellSign, NeuronParams, PopulationState, SpikeRecord};
