//! Discrete-time leaky integrate-and-fire primitives.
//!
//! One call advances one simulated time unit with a first-order forward Euler
//! step:
//!
//! ```text
//! u_half = (1 - 1/τ_m)·u + I          (u + I for integrate-and-fire cells)
//! s      = H(u_half - ϑ)
//! u'     = u_half·(1 - s)              (reset to zero)
//! a'     = (1 - 1/τ_s)·a + (1/τ_s)·s   (unsigned PSC trace)
//! ```
//!
//! Traces are stored unsigned; a population's cell sign is applied when its
//! PSC is read by a downstream consumer.
//!
//! Every array is `trials × neurons`; a single trial is a one-row matrix.

use ndarray::{Array, Array2, ArrayView2, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

/// Membrane and synapse constants of one cell group. Time constants are in
/// timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub tau_m: f64,
    pub tau_s: f64,
    pub threshold: f64,
    /// Disables the leak term.
    #[serde(default)]
    pub integrate_and_fire: bool,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            tau_m: 4.0,
            tau_s: 2.0,
            threshold: 1.0,
            integrate_and_fire: false,
        }
    }
}

impl NeuronParams {
    pub fn new(tau_m: f64, tau_s: f64, threshold: f64) -> Result<Self> {
        let p = Self {
            tau_m,
            tau_s,
            threshold,
            integrate_and_fire: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Leak-free cell. `tau_m` is kept at 1 for bookkeeping only.
    pub fn integrate_and_fire(tau_s: f64, threshold: f64) -> Result<Self> {
        let p = Self {
            tau_m: 1.0,
            tau_s,
            threshold,
            integrate_and_fire: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m >= 1.0) || !self.tau_m.is_finite() {
            return Err(Error::Config(format!("tau_m must be >= 1, got {}", self.tau_m)));
        }
        if !(self.tau_s >= 1.0) || !self.tau_s.is_finite() {
            return Err(Error::Config(format!("tau_s must be >= 1, got {}", self.tau_s)));
        }
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Multiplier applied to the previous membrane potential.
    pub fn leak(&self) -> f64 {
        if self.integrate_and_fire {
            1.0
        } else {
            1.0 - 1.0 / self.tau_m
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellSign {
    Excitatory,
    Inhibitory,
}

impl CellSign {
    pub fn value(self) -> f64 {
        match self {
            CellSign::Excitatory => 1.0,
            CellSign::Inhibitory => -1.0,
        }
    }
}

/// Two-compartment cell types that carry an apical error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Pyr,
    Pv,
}

impl CellKind {
    pub fn sign(self) -> CellSign {
        match self {
            CellKind::Pyr => CellSign::Excitatory,
            CellKind::Pv => CellSign::Inhibitory,
        }
    }
}

/// Binary spike indicators for one timestep, `trials × neurons`, stored as
/// 0.0 / 1.0 so they feed matrix products directly.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRecord {
    bits: Array2<f64>,
}

impl SpikeRecord {
    pub fn zeros(trials: usize, neurons: usize) -> Self {
        Self {
            bits: Array2::zeros((trials, neurons)),
        }
    }

    /// Single-trial record from 0/1 bits.
    pub fn from_bits(bits: &[u8]) -> Self {
        let row = bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 });
        Self {
            bits: Array2::from_shape_vec((1, bits.len()), row.collect())
                .expect("row vector shape"),
        }
    }

    pub fn from_matrix(bits: Array2<f64>) -> Result<Self> {
        if bits.iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::Config("spike record entries must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn as_matrix(&self) -> &Array2<f64> {
        &self.bits
    }

    pub fn trials(&self) -> usize {
        self.bits.nrows()
    }

    pub fn len(&self) -> usize {
        self.bits.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.ncols() == 0
    }

    pub fn fired(&self, trial: usize, neuron: usize) -> bool {
        self.bits[[trial, neuron]] != 0.0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0.0).count()
    }

    pub fn row_bits(&self, trial: usize) -> Vec<u8> {
        self.bits.row(trial).iter().map(|&b| (b != 0.0) as u8).collect()
    }
}

/// Dynamic state of one cell group.
#[derive(Debug, Clone)]
pub struct PopulationState {
    /// Membrane potential after reset.
    pub u: Array2<f64>,
    /// Membrane potential of the latest step before reset (`u[t+0.5]`); this
    /// is where the surrogate slope is evaluated.
    pub u_pre_reset: Array2<f64>,
    /// Unsigned output PSC trace.
    pub a: Array2<f64>,
    pub spikes: SpikeRecord,
    /// Apical (error) current.
    pub apical: Array2<f64>,
}

impl PopulationState {
    pub fn new(trials: usize, neurons: usize) -> Self {
        Self {
            u: Array2::zeros((trials, neurons)),
            u_pre_reset: Array2::zeros((trials, neurons)),
            a: Array2::zeros((trials, neurons)),
            spikes: SpikeRecord::zeros(trials, neurons),
            apical: Array2::zeros((trials, neurons)),
        }
    }

    pub fn neurons(&self) -> usize {
        self.u.ncols()
    }

    pub fn trials(&self) -> usize {
        self.u.nrows()
    }

    /// Membrane update followed by PSC update.
    pub fn step(&mut self, input: ArrayView2<f64>, params: &NeuronParams) -> Result<()> {
        let (u_half, spikes) = step_membrane(&mut self.u, input, params)?;
        step_psc(&mut self.a, &spikes, params.tau_s, CellSign::Excitatory)?;
        self.u_pre_reset = u_half;
        self.spikes = spikes;
        Ok(())
    }

    /// PSC as seen by downstream synapses.
    pub fn emitted(&self, sign: CellSign) -> Array2<f64> {
        match sign {
            CellSign::Excitatory => self.a.clone(),
            CellSign::Inhibitory => self.a.mapv(|x| -x),
        }
    }
}

/// Advances membrane potentials in place by one Euler step. Returns the
/// pre-reset potential and the spikes of this step.
pub fn step_membrane(
    u: &mut Array2<f64>,
    input_current: ArrayView2<f64>,
    params: &NeuronParams,
) -> Result<(Array2<f64>, SpikeRecord)> {
    check_shape("step_membrane", u.dim(), input_current.dim())?;
    let leak = params.leak();
    let theta = params.threshold;
    let mut u_half = Array2::zeros(u.dim());
    let mut spikes = Array2::zeros(u.dim());
    Zip::from(&mut *u)
        .and(&input_current)
        .and(&mut u_half)
        .and(&mut spikes)
        .for_each(|u, &i, h, s| {
            let half = leak * *u + i;
            let fired = if half >= theta { 1.0 } else { 0.0 };
            *h = half;
            *s = fired;
            *u = half * (1.0 - fired);
        });
    Ok((u_half, SpikeRecord { bits: spikes }))
}

/// Filters spikes into the unsigned trace `a` in place and returns the
/// signed PSC emitted downstream.
pub fn step_psc(
    a: &mut Array2<f64>,
    spikes: &SpikeRecord,
    tau_s: f64,
    sign: CellSign,
) -> Result<Array2<f64>> {
    check_shape("step_psc", a.dim(), spikes.bits.dim())?;
    let decay = 1.0 - 1.0 / tau_s;
    let gain = 1.0 / tau_s;
    Zip::from(&mut *a)
        .and(&spikes.bits)
        .for_each(|a, &s| *a = decay * *a + gain * s);
    let sign = sign.value();
    Ok(a.mapv(|x| sign * x))
}

/// `1 / (1 + |u - ϑ|)²` with ϑ = `threshold`.
#[inline]
pub fn surrogate_at(u: f64, threshold: f64) -> f64 {
    let d = 1.0 + (u - threshold).abs();
    1.0 / (d * d)
}

/// Elementwise surrogate slope for unit threshold.
pub fn surrogate_slope<D: Dimension>(u: &Array<f64, D>) -> Array<f64, D> {
    u.mapv(|x| surrogate_at(x, 1.0))
}

/// Error component of the backward PSC: `+σ'(u)·I_a` for Pyr, `-σ'(u)·I_a`
/// for PV.
pub fn error_signal(
    u: ArrayView2<f64>,
    apical: ArrayView2<f64>,
    kind: CellKind,
    threshold: f64,
) -> Result<Array2<f64>> {
    check_shape("error_signal", u.dim(), apical.dim())?;
    let sign = kind.sign().value();
    let mut e = Array2::zeros(u.dim());
    Zip::from(&mut e)
        .and(&u)
        .and(&apical)
        .for_each(|e, &u, &ia| *e = sign * surrogate_at(u, threshold) * ia);
    Ok(e)
}

/// Backward PSC `a_b + e` for unit threshold. `a_b` is the signed base PSC.
pub fn backward_psc(
    a_b: ArrayView2<f64>,
    u: ArrayView2<f64>,
    apical: ArrayView2<f64>,
    kind: CellKind,
) -> Result<Array2<f64>> {
    check_shape("backward_psc", a_b.dim(), u.dim())?;
    let e = error_signal(u, apical, kind, 1.0)?;
    Ok(&a_b + &e)
}
