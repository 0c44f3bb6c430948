//! Layered network of Pyr/PV populations with backward microcircuits.
//!
//! `layer_sizes = [n_in, h_1, …, h_k, n_out]`. The input is a current
//! injected through a mixed-sign matrix; each hidden layer holds `h` Pyr and
//! `h` PV cells; the output layer holds `n_out` Pyr cells only.
//!
//! Which cells receive forward (basal) input depends on the inhibitory
//! variant. Under MC1 the PV cells of hidden layers are driven like the Pyr
//! cells and carry their own error; under MC2/MC3 each PV cell copies its
//! paired Pyr cell and only the Pyr rows of the forward matrices exist.
//!
//! Every timestep is evaluated in topological order: all forward layers,
//! then the output error, then top-down routing from the output to the first
//! layer, then plasticity. An error injected at step `t` reaches every layer
//! at step `t`.
//!
//! Backward routing runs either through the explicit microcircuits or in the
//! idealized form `I_a = B₊·e₊ + B₋·e₋`, which is what the circuits compute
//! when their excitatory and inhibitory backward weights are aligned.

use log::warn;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::dale::{DaleMatrix, InitVariant, PreSign};
use crate::error::{check_shape, Error, Result};
pub use crate::microcircuits::InhVariant;
use crate::microcircuits::{
    desync_count, inh_mc1_step, mc2_apical_merge, pv_pair_step, ExcBackwardCircuit, InhBackwardCircuit, Mc1Params,
    Mc1State, PairParams, SomMirror,
};
use crate::learning::PlasticityAccumulator;
use crate::neuron::{surrogate_at, CellSign, NeuronParams, PopulationState};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackwardMode {
    Microcircuit,
    #[default]
    Idealized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub layer_sizes: Vec<usize>,
    pub timesteps: usize,
    pub backward_mode: BackwardMode,
    pub inh_variant: InhVariant,
    /// Forward Pyr/PV cells.
    pub neuron: NeuronParams,
    pub init: InitVariant,
    /// Start every cancelling backward matrix as a copy of the one it
    /// cancels.
    pub aligned_backward: bool,
    /// Train backward weights with the apical anti-Hebbian rule
    /// (microcircuit mode only).
    pub apical_learning: bool,
    pub som_threshold: f64,
    pub mc1: Mc1Params,
    pub pair: PairParams,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![784, 100, 10],
            timesteps: 5,
            backward_mode: BackwardMode::Idealized,
            inh_variant: InhVariant::Mc2,
            neuron: NeuronParams::default(),
            init: InitVariant::Uniform,
            aligned_backward: true,
            apical_learning: false,
            som_threshold: 0.5,
            mc1: Mc1Params::default(),
            pair: PairParams::default(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer_sizes needs an input and an output size, all positive; got {:?}",
                self.layer_sizes
            )));
        }
        self.neuron.validate()?;
        match self.inh_variant {
            InhVariant::Mc1 => self.mc1.validate()?,
            InhVariant::Mc2 | InhVariant::Mc3 => self.pair.validate()?,
        }
        if !(self.som_threshold > 0.0 && self.som_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "SOM threshold must lie in (0, 1] so one Pyr pulse drives one SOM spike, got {}",
                self.som_threshold
            )));
        }
        if self.apical_learning && self.backward_mode != BackwardMode::Microcircuit {
            return Err(Error::Config(
                "apical learning needs backward_mode = microcircuit".into(),
            ));
        }
        Ok(())
    }
}

/// One spiking layer and the backward circuits that project from it to the
/// layer below.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAssembly {
    pub n_pyr: usize,
    pub n_pv: usize,
    /// PV cells receive forward input (MC1 hidden layers).
    pub pv_driven: bool,
    /// Forward weights from the lower Pyr cells (or from the input), rows are
    /// the driven cells: Pyr first, then PV when `pv_driven`.
    pub w_pyr: DaleMatrix,
    /// Forward weights from the lower PV cells.
    pub w_pv: Option<DaleMatrix>,
    /// Absent on the first layer, which has no spiking layer below it.
    pub exc: Option<ExcBackwardCircuit>,
    pub inh: Option<InhBackwardCircuit>,
}

impl LayerAssembly {
    pub fn driven(&self) -> usize {
        self.n_pyr + if self.pv_driven { self.n_pv } else { 0 }
    }

    pub fn cells(&self) -> usize {
        self.n_pyr + self.n_pv
    }

    fn matrices(&self) -> Vec<&DaleMatrix> {
        let mut out = vec![&self.w_pyr];
        out.extend(self.w_pv.iter());
        if let Some(exc) = &self.exc {
            out.push(&exc.w_back_pyr);
            if let Some(som) = &exc.som {
                out.push(&som.w_pys);
                out.push(&som.w_back_som);
            }
        }
        if let Some(inh) = &self.inh {
            out.extend(inh.w_back_pv.iter());
            out.extend(inh.w_back_pair.iter());
        }
        out
    }

    fn matrices_mut(&mut self) -> Vec<&mut DaleMatrix> {
        let mut out = vec![&mut self.w_pyr];
        out.extend(self.w_pv.iter_mut());
        if let Some(exc) = &mut self.exc {
            out.push(&mut exc.w_back_pyr);
            if let Some(som) = &mut exc.som {
                out.push(&mut som.w_pys);
                out.push(&mut som.w_back_som);
            }
        }
        if let Some(inh) = &mut self.inh {
            out.extend(inh.w_back_pv.iter_mut());
            out.extend(inh.w_back_pair.iter_mut());
        }
        out
    }
}

/// Per-step records of one layer, each `trials × cells`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace {
    pub pyr_u: Vec<Array2<f64>>,
    pub pyr_spikes: Vec<Array2<f64>>,
    pub pyr_psc: Vec<Array2<f64>>,
    pub pv_u: Vec<Array2<f64>>,
    pub pv_spikes: Vec<Array2<f64>>,
    /// Signed (non-positive) PV PSC.
    pub pv_psc: Vec<Array2<f64>>,
    /// Top-down apical current, Pyr columns then PV columns.
    pub apical: Vec<Array2<f64>>,
    /// Error of the driven cells.
    pub error: Vec<Array2<f64>>,
}

/// Full record of one simulated presentation (or batch of presentations).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialTrace {
    pub layers: Vec<LayerTrace>,
    pub output_psc: Vec<Array2<f64>>,
    /// Per-trial loss.
    pub loss: Array1<f64>,
}

impl TrialTrace {
    pub fn timesteps(&self) -> usize {
        self.output_psc.len()
    }
}

/// Input currents for a simulation, `trials × n_in`.
#[derive(Debug, Clone, Copy)]
pub enum InputDrive<'a> {
    /// The same current on every step.
    Constant(ArrayView2<'a, f64>),
    /// One matrix per step.
    PerStep(&'a [Array2<f64>]),
}

impl InputDrive<'_> {
    fn trials(&self) -> usize {
        match self {
            InputDrive::Constant(x) => x.nrows(),
            InputDrive::PerStep(xs) => xs.first().map_or(0, |x| x.nrows()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Per-trial loss `½ Σ_t ||a_out[t] - y||²` (zero without targets).
    pub loss: Array1<f64>,
    /// Time-summed output PSC, `trials × n_out`.
    pub output_sum: Array2<f64>,
    pub trace: Option<TrialTrace>,
}

impl SimOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.output_sum.rows().into_iter().map(argmax).collect()
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Apical current `y - a_out` and loss `½ Σ_t ||a_out[t] - y||²` for one
/// trial; `a_out` is `T × n_out`.
pub fn output_error(a_out: ArrayView2<f64>, target: usize) -> Result<(Array2<f64>, f64)> {
    let classes = a_out.ncols();
    if target >= classes {
        return Err(Error::TargetOutOfRange { target, classes });
    }
    let mut ia = a_out.mapv(|a| -a);
    ia.column_mut(target).mapv_inplace(|x| x + 1.0);
    let loss = 0.5 * ia.iter().map(|x| x * x).sum::<f64>();
    Ok((ia, loss))
}

/// Angle in degrees between `Wᵀ` and `B`, flattened.
pub fn alignment_angle(w_forward: &DaleMatrix, b_backward: &DaleMatrix) -> Result<f64> {
    alignment_angle_arrays(w_forward.values().view(), b_backward.values().view())
}

pub fn alignment_angle_arrays(w: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_shape("alignment_angle", (w.ncols(), w.nrows()), b.dim())?;
    let dot: f64 = Zip::from(&w.t()).and(&b).fold(0.0, |acc, &x, &y| acc + x * y);
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nw == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedAngle("zero matrix has no direction".into()));
    }
    Ok((dot / (nw * nb)).clamp(-1.0, 1.0).acos().to_degrees())
}

struct LayerState {
    pyr: PopulationState,
    pv: PopulationState,
    som: Option<PopulationState>,
    mc1: Option<Mc1State>,
    apical: Array2<f64>,
    error: Array2<f64>,
    /// Time-summed error, used for constant input drive.
    error_sum: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<LayerAssembly>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, Stream::Init, 0);
        let sizes = &config.layer_sizes;
        let n_layers = sizes.len() - 1;
        let variant = config.inh_variant;
        let microcircuit = config.backward_mode == BackwardMode::Microcircuit;
        let mut layers: Vec<LayerAssembly> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let is_output = l + 1 == n_layers;
            let n_pyr = sizes[l + 1];
            let n_pv = if is_output { 0 } else { n_pyr };
            let pv_driven = n_pv > 0 && variant == InhVariant::Mc1;
            let driven = n_pyr + if pv_driven { n_pv } else { 0 };
            let name = |m: &str| format!("layer{}.{m}", l + 1);
            let init = |m: &str, shape, sign, rng: &mut _| {
                DaleMatrix::init_kaiming(name(m), shape, config.init, sign, rng)
            };

            let (w_pyr, w_pv, exc, inh);
            if l == 0 {
                w_pyr = init("w_pyr", (driven, sizes[0]), PreSign::Mixed, &mut rng)?;
                w_pv = None;
                exc = None;
                inh = None;
            } else {
                let below = &layers[l - 1];
                let targets = below.cells();
                w_pyr = init("w_pyr", (driven, below.n_pyr), PreSign::Excitatory, &mut rng)?;
                w_pv = if below.n_pv > 0 {
                    Some(init("w_pv", (driven, below.n_pv), PreSign::Inhibitory, &mut rng)?)
                } else {
                    None
                };
                let w_back_pyr = init("w_back_pyr", (targets, n_pyr), PreSign::Excitatory, &mut rng)?;
                let partner = |m: &str, sign, of: &DaleMatrix, rng: &mut _| -> Result<DaleMatrix> {
                    if config.aligned_backward {
                        DaleMatrix::new(name(m), sign, of.values().clone())
                    } else {
                        DaleMatrix::init_kaiming(name(m), of.shape(), config.init, sign, rng)
                    }
                };
                let mc3_hidden = variant == InhVariant::Mc3 && n_pv > 0;
                let som = if mc3_hidden {
                    None
                } else {
                    Some(SomMirror {
                        w_pys: DaleMatrix::new(name("w_pys"), PreSign::Excitatory, Array2::eye(n_pyr))?,
                        w_back_som: partner("w_back_som", PreSign::Inhibitory, &w_back_pyr, &mut rng)?,
                        params: NeuronParams {
                            threshold: config.som_threshold,
                            ..SomMirror::default_params(config.neuron.tau_s)
                        },
                    })
                };
                inh = if n_pv == 0 {
                    None
                } else {
                    let (pv, pair) = match variant {
                        InhVariant::Mc1 => {
                            let pv = init("w_back_pv", (targets, n_pv), PreSign::Inhibitory, &mut rng)?;
                            let pair = partner("w_back_pair", PreSign::Excitatory, &pv, &mut rng)?;
                            (Some(pv), Some(pair))
                        }
                        InhVariant::Mc2 => (None, None),
                        InhVariant::Mc3 => (
                            Some(partner("w_back_pv", PreSign::Inhibitory, &w_back_pyr, &mut rng)?),
                            None,
                        ),
                    };
                    Some(InhBackwardCircuit::new(variant, pv, pair, config.mc1, config.pair)?)
                };
                exc = Some(ExcBackwardCircuit::new(w_back_pyr, som)?);
            }
            if !microcircuit && !config.aligned_backward {
                log::debug!("idealized mode ignores the cancelling backward matrices");
            }
            layers.push(LayerAssembly {
                n_pyr,
                n_pv,
                pv_driven,
                w_pyr,
                w_pv,
                exc,
                inh,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerAssembly] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerAssembly] {
        &mut self.layers
    }

    pub fn set_backward_mode(&mut self, mode: BackwardMode) {
        self.config.backward_mode = mode;
    }

    pub fn n_inputs(&self) -> usize {
        self.config.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.config.layer_sizes.last().expect("validated non-empty")
    }

    /// All weight matrices in a fixed order.
    pub fn matrices(&self) -> Vec<&DaleMatrix> {
        self.layers.iter().flat_map(|l| l.matrices()).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut DaleMatrix> {
        self.layers.iter_mut().flat_map(|l| l.matrices_mut()).collect()
    }

    pub fn matrix(&self, name: &str) -> Option<&DaleMatrix> {
        self.matrices().into_iter().find(|m| m.name() == name)
    }

    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut DaleMatrix> {
        self.matrices_mut().into_iter().find(|m| m.name() == name)
    }

    /// Replaces the matrix with the same name; shape and sign must agree.
    pub fn load_matrix(&mut self, m: DaleMatrix) -> Result<()> {
        let slot = self.matrix_mut(m.name()).ok_or_else(|| Error::Matrix {
            name: m.name().to_string(),
            reason: "no such matrix in this network".into(),
        })?;
        if slot.shape() != m.shape() || slot.pre_sign() != m.pre_sign() {
            return Err(Error::Matrix {
                name: m.name().to_string(),
                reason: format!(
                    "expected {:?} {:?}, found {:?} {:?}",
                    slot.shape(),
                    slot.pre_sign(),
                    m.shape(),
                    m.pre_sign()
                ),
            });
        }
        *slot = m;
        Ok(())
    }

    /// Names of the matrices changed by plasticity: the forward matrices,
    /// plus the backward matrices when apical learning is on.
    pub fn plastic_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.w_pyr.name().to_string());
            out.extend(layer.w_pv.iter().map(|m| m.name().to_string()));
            if self.config.apical_learning {
                if let Some(exc) = &layer.exc {
                    out.push(exc.w_back_pyr.name().to_string());
                    out.extend(exc.som.iter().map(|s| s.w_back_som.name().to_string()));
                }
                if let Some(inh) = &layer.inh {
                    out.extend(inh.w_back_pv.iter().map(|m| m.name().to_string()));
                    out.extend(inh.w_back_pair.iter().map(|m| m.name().to_string()));
                }
            }
        }
        out
    }

    /// Forward matrix `[W_Pyr | W_PV]` (driven × lower cells) and effective
    /// backward matrix `[B₊ | B₋]` (lower cells × driven) of layer `l ≥ 1`.
    pub fn forward_backward_pair(&self, l: usize) -> Option<(Array2<f64>, Array2<f64>)> {
        let layer = self.layers.get(l)?;
        let exc = layer.exc.as_ref()?;
        let w = match &layer.w_pv {
            Some(pv) => concatenate![Axis(1), layer.w_pyr.values().view(), pv.values().view()],
            None => layer.w_pyr.values().clone(),
        };
        let b = match (&layer.inh, layer.pv_driven) {
            (Some(inh), true) => {
                let pv = inh.w_back_pv.as_ref().expect("MC1 layers carry W_←PV");
                concatenate![Axis(1), exc.w_back_pyr.values().view(), pv.values().view()]
            }
            _ => exc.w_back_pyr.values().clone(),
        };
        Some((w, b))
    }

    /// Alignment angle between `B` and `Wᵀ` for every layer with a backward
    /// projection, as `(layer index, degrees)`.
    pub fn alignment_angles(&self) -> Result<Vec<(usize, f64)>> {
        (1..self.layers.len())
            .filter_map(|l| self.forward_backward_pair(l).map(|p| (l, p)))
            .map(|(l, (w, b))| Ok((l, alignment_angle_arrays(w.view(), b.view())?)))
            .collect()
    }

    /// `δᵀ·W·B·δ` for layer `l`, `δ` over the driven cells.
    pub fn fa_quadratic(&self, l: usize, delta: ArrayView1<f64>) -> Result<f64> {
        let (w, b) = self
            .forward_backward_pair(l)
            .ok_or_else(|| Error::Config(format!("layer {l} has no backward projection")))?;
        if delta.len() != w.nrows() {
            return Err(Error::DimensionMismatch {
                context: "fa_quadratic",
                expected: format!("{} driven cells", w.nrows()),
                actual: format!("{}", delta.len()),
            });
        }
        Ok(delta.dot(&w.dot(&b.dot(&delta))))
    }

    /// Runs one presentation; `input_currents` is `T × n_in`, one row per
    /// step. The returned trace has single-row matrices.
    pub fn run_trial(&self, input_currents: ArrayView2<f64>, target: usize) -> Result<TrialTrace> {
        check_shape(
            "run_trial input",
            (self.config.timesteps, self.n_inputs()),
            input_currents.dim(),
        )?;
        let steps: Vec<Array2<f64>> = input_currents
            .rows()
            .into_iter()
            .map(|r| r.insert_axis(Axis(0)).to_owned())
            .collect();
        let out = self.simulate(InputDrive::PerStep(&steps), Some(&[target]), None, true)?;
        Ok(out.trace.expect("trace requested"))
    }

    /// Time-summed output PSC argmax for each row of `inputs`.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.simulate(InputDrive::Constant(inputs), None, None, false)?.predictions())
    }

    /// Simulates a batch of trials for `timesteps` steps. With `targets`,
    /// errors are injected and routed; with an accumulator, the per-trial
    /// plasticity sums are added to it.
    pub fn simulate(
        &self,
        input: InputDrive,
        targets: Option<&[usize]>,
        mut acc: Option<&mut PlasticityAccumulator>,
        record: bool,
    ) -> Result<SimOutput> {
        let cfg = &self.config;
        let trials = input.trials();
        if trials == 0 {
            return Err(Error::EmptyBatch);
        }
        let n_in = self.n_inputs();
        match input {
            InputDrive::Constant(x) => check_shape("simulate input", (trials, n_in), x.dim())?,
            InputDrive::PerStep(xs) => {
                if xs.len() != cfg.timesteps {
                    return Err(Error::DimensionMismatch {
                        context: "simulate input steps",
                        expected: format!("{}", cfg.timesteps),
                        actual: format!("{}", xs.len()),
                    });
                }
                for x in xs {
                    check_shape("simulate input", (trials, n_in), x.dim())?;
                }
            }
        }
        let n_out = self.n_outputs();
        let y = match targets {
            Some(t) => {
                if t.len() != trials {
                    return Err(Error::DimensionMismatch {
                        context: "simulate targets",
                        expected: format!("{trials}"),
                        actual: format!("{}", t.len()),
                    });
                }
                let mut y = Array2::zeros((trials, n_out));
                for (row, &k) in t.iter().enumerate() {
                    if k >= n_out {
                        return Err(Error::TargetOutOfRange { target: k, classes: n_out });
                    }
                    y[[row, k]] = 1.0;
                }
                Some(y)
            }
            None => None,
        };
        let microcircuit = cfg.backward_mode == BackwardMode::Microcircuit;
        let learn_apical = cfg.apical_learning && acc.is_some();
        if let Some(acc) = acc.as_deref_mut() {
            acc.add_trials(trials);
        }

        let mut states: Vec<LayerState> = self
            .layers
            .iter()
            .map(|layer| LayerState {
                pyr: PopulationState::new(trials, layer.n_pyr),
                pv: PopulationState::new(trials, layer.n_pv),
                som: layer
                    .exc
                    .as_ref()
                    .and_then(|e| e.som.as_ref())
                    .filter(|_| microcircuit)
                    .map(|_| PopulationState::new(trials, layer.n_pyr)),
                mc1: (microcircuit && layer.pv_driven && layer.exc.is_some())
                    .then(|| Mc1State::new(trials, layer.n_pv)),
                apical: Array2::zeros((trials, layer.cells())),
                error: Array2::zeros((trials, layer.driven())),
                error_sum: Array2::zeros((trials, layer.driven())),
            })
            .collect();

        let constant_drive = match input {
            InputDrive::Constant(x) => Some(self.layers[0].w_pyr.apply(x)?),
            InputDrive::PerStep(_) => None,
        };

        let mut trace = record.then(|| TrialTrace {
            layers: vec![LayerTrace::default(); self.layers.len()],
            ..TrialTrace::default()
        });
        let mut loss = Array1::zeros(trials);
        let mut output_sum = Array2::zeros((trials, n_out));
        let mut desync = 0usize;
        let theta = cfg.neuron.threshold;
        let tau_s = cfg.neuron.tau_s;

        for t in 0..cfg.timesteps {
            // Forward sweep.
            for l in 0..self.layers.len() {
                let layer = &self.layers[l];
                let drive = if l == 0 {
                    match (&constant_drive, input) {
                        (Some(d), _) => d.clone(),
                        (None, InputDrive::PerStep(xs)) => layer.w_pyr.apply(xs[t].view())?,
                        (None, InputDrive::Constant(_)) => unreachable!(),
                    }
                } else {
                    let (lower, _) = states.split_at(l);
                    let below = &lower[l - 1];
                    let mut d = layer.w_pyr.apply(below.pyr.a.view())?;
                    if let Some(w_pv) = &layer.w_pv {
                        d += &w_pv.apply(below.pv.emitted(CellSign::Inhibitory).view())?;
                    }
                    d
                };
                let st = &mut states[l];
                st.pyr.step(drive.slice(s![.., ..layer.n_pyr]), &cfg.neuron)?;
                if layer.n_pv > 0 {
                    if layer.pv_driven {
                        st.pv.step(drive.slice(s![.., layer.n_pyr..]), &cfg.neuron)?;
                    } else {
                        pv_pair_step(&mut st.pv, &st.pyr.spikes, &cfg.pair, tau_s, None)?;
                        desync += desync_count(&st.pyr.spikes, &st.pv.spikes);
                    }
                }
                if let (Some(som_state), Some(exc)) = (&mut st.som, &layer.exc) {
                    exc.som.as_ref().expect("SOM state implies mirror").step(som_state, &st.pyr.spikes)?;
                }
                if let Some(mc1) = &mut st.mc1 {
                    inh_mc1_step(&st.pv.spikes, &cfg.mc1, tau_s, mc1)?;
                }
                if st.pyr.u.iter().chain(st.pv.u.iter()).any(|u| !u.is_finite()) {
                    return Err(Error::NumericFault {
                        step: t,
                        what: format!("non-finite membrane potential in layer {}", l + 1),
                    });
                }
            }

            let out_state = &states[self.layers.len() - 1];
            output_sum += &out_state.pyr.a;

            // Output error and top-down sweep.
            if let Some(y) = &y {
                let ia = y - &out_state.pyr.a;
                Zip::from(&mut loss)
                    .and(ia.rows())
                    .for_each(|l, r| *l += 0.5 * r.dot(&r));
                states.last_mut().expect("at least one layer").apical = ia;

                for l in (0..self.layers.len()).rev() {
                    let layer = &self.layers[l];
                    let st = &mut states[l];
                    let apical_pyr = st.apical.slice(s![.., ..layer.n_pyr]);
                    let effective = if cfg.inh_variant == InhVariant::Mc2 && layer.n_pv > 0 {
                        mc2_apical_merge(apical_pyr, st.apical.slice(s![.., layer.n_pyr..]), &cfg.pair)?
                    } else {
                        apical_pyr.to_owned()
                    };
                    let mut error = Array2::zeros((trials, layer.driven()));
                    Zip::from(error.slice_mut(s![.., ..layer.n_pyr]))
                        .and(&st.pyr.u_pre_reset)
                        .and(&effective)
                        .for_each(|e, &u, &ia| *e = surrogate_at(u, theta) * ia);
                    if layer.pv_driven {
                        Zip::from(error.slice_mut(s![.., layer.n_pyr..]))
                            .and(&st.pv.u_pre_reset)
                            .and(&st.apical.slice(s![.., layer.n_pyr..]))
                            .for_each(|e, &u, &ia| *e = -surrogate_at(u, theta) * ia);
                    }
                    st.error = error;

                    let Some(exc) = &layer.exc else { continue };
                    let e_pyr = st.error.slice(s![.., ..layer.n_pyr]);
                    let lower_apical = if microcircuit {
                        let mut terms: Vec<(&DaleMatrix, Array2<f64>)> = Vec::new();
                        terms.push((&exc.w_back_pyr, &st.pyr.a + &e_pyr));
                        if let (Some(som), Some(som_state)) = (&exc.som, &st.som) {
                            terms.push((&som.w_back_som, som_state.emitted(CellSign::Inhibitory)));
                        }
                        if let Some(inh) = &layer.inh {
                            match inh.variant {
                                InhVariant::Mc1 => {
                                    let e_pv = st.error.slice(s![.., layer.n_pyr..]);
                                    let back_pv = &st.pv.emitted(CellSign::Inhibitory) + &e_pv;
                                    let aux = st.mc1.as_ref().expect("MC1 state in microcircuit mode");
                                    terms.push((inh.w_back_pv.as_ref().expect("MC1 W_←PV"), back_pv));
                                    terms.push((
                                        inh.w_back_pair.as_ref().expect("MC1 W_←Pyr(PV)"),
                                        aux.pyr.a.clone(),
                                    ));
                                }
                                InhVariant::Mc2 => {}
                                InhVariant::Mc3 => terms.push((
                                    inh.w_back_pv.as_ref().expect("MC3 W_←PV"),
                                    st.pv.emitted(CellSign::Inhibitory),
                                )),
                            }
                        }
                        let mut current = Array2::zeros((trials, self.layers[l - 1].cells()));
                        for (m, psc) in &terms {
                            current += &m.apply(psc.view())?;
                        }
                        if learn_apical {
                            let acc = acc.as_deref_mut().expect("checked above");
                            for (m, psc) in &terms {
                                acc.add(m.name(), -current.t().dot(psc))?;
                            }
                        }
                        current
                    } else {
                        let mut current = exc.w_back_pyr.apply(e_pyr)?;
                        if layer.pv_driven {
                            let inh = layer.inh.as_ref().expect("MC1 layers carry W_←PV");
                            let b_minus = inh.w_back_pv.as_ref().expect("MC1 W_←PV");
                            current += &b_minus.apply(st.error.slice(s![.., layer.n_pyr..]))?;
                        }
                        current
                    };
                    if lower_apical.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NumericFault {
                            step: t,
                            what: format!("non-finite apical current below layer {}", l + 1),
                        });
                    }
                    states[l - 1].apical = lower_apical;
                }

                // Basal Hebbian accumulation.
                if let Some(acc) = acc.as_deref_mut() {
                    for l in 0..self.layers.len() {
                        let layer = &self.layers[l];
                        if l == 0 {
                            match input {
                                InputDrive::Constant(_) => {
                                    let st = &mut states[0];
                                    st.error_sum += &st.error;
                                }
                                InputDrive::PerStep(xs) => {
                                    acc.add(layer.w_pyr.name(), states[0].error.t().dot(&xs[t]))?;
                                }
                            }
                        } else {
                            let e = &states[l].error;
                            let below = &states[l - 1];
                            acc.add(layer.w_pyr.name(), e.t().dot(&below.pyr.a))?;
                            if let Some(w_pv) = &layer.w_pv {
                                acc.add(w_pv.name(), e.t().dot(&below.pv.emitted(CellSign::Inhibitory)))?;
                            }
                        }
                    }
                }
            }

            if let Some(tr) = &mut trace {
                for (lt, st) in tr.layers.iter_mut().zip(&states) {
                    lt.pyr_u.push(st.pyr.u_pre_reset.clone());
                    lt.pyr_spikes.push(st.pyr.spikes.as_matrix().clone());
                    lt.pyr_psc.push(st.pyr.a.clone());
                    lt.pv_u.push(st.pv.u_pre_reset.clone());
                    lt.pv_spikes.push(st.pv.spikes.as_matrix().clone());
                    lt.pv_psc.push(st.pv.emitted(CellSign::Inhibitory));
                    lt.apical.push(st.apical.clone());
                    lt.error.push(st.error.clone());
                }
                tr.output_psc.push(states[self.layers.len() - 1].pyr.a.clone());
            }
        }

        if let (Some(acc), InputDrive::Constant(x)) = (acc.as_deref_mut(), input) {
            if y.is_some() {
                acc.add(self.layers[0].w_pyr.name(), states[0].error_sum.t().dot(&x))?;
            }
        }
        if desync > 0 {
            warn!("{desync} paired PV spikes fell out of sync with their Pyr cells");
        }
        if let Some(tr) = &mut trace {
            tr.loss = loss.clone();
        }
        Ok(SimOutput {
            loss,
            output_sum,
            trace,
        })
    }
}
