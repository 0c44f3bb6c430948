//! Backward microcircuits.
//!
//! Each Pyr cell sends its backward PSC `a_b + e` to the apical dendrites of
//! the layer below. The base part `a_b` must be cancelled so that only the
//! error reaches the lower layer:
//!
//! - excitatory circuit: a paired SOM cell mirrors the Pyr spike train and
//!   projects `-a_b` through `W_←SOM`;
//! - MC1 (disinhibition): each PV cell silences a tonically active SOM cell,
//!   releasing an auxiliary Pyr cell that mirrors the PV train with an
//!   excitatory PSC through `W_←Pyr(PV)`;
//! - MC2 (autapse): each PV cell copies its paired Pyr cell, does not project
//!   backward, and folds its apical error into the Pyr apical current;
//! - MC3 (direct pairing): each PV cell copies its paired Pyr cell and
//!   cancels the Pyr base PSC itself through `W_←PV`.
//!
//! Fixed pairing synapses (`w_pys`, `w_pvs`, `w_spy`, `w_pypv`) use
//! `τ_s = 1`, so one presynaptic spike delivers a single-step PSC of 1 and
//! every cell of a circuit responds within the same timestep.
//!
//! Assembly competition forms the Pyr→SOM pairing from random weights by a
//! soft-bounded Hebbian rule followed by dual-sum normalization.

use log::warn;
use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dale::{doubly_normalize, DaleMatrix};
use crate::error::{check_shape, Error, Result};
use crate::neuron::{surrogate_at, NeuronParams, PopulationState, SpikeRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InhVariant {
    Mc1,
    #[default]
    Mc2,
    Mc3,
}

/// Pyr→SOM mirror: the SOM population and its backward projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SomMirror {
    /// Pairing weights, `SOM × Pyr`.
    pub w_pys: DaleMatrix,
    /// `W_←SOM`, `targets × SOM`.
    pub w_back_som: DaleMatrix,
    /// SOM membrane constants. `tau_s` applies to the backward synapse and
    /// must match the paired Pyr cells so the traces cancel.
    pub params: NeuronParams,
}

impl SomMirror {
    /// Default SOM cell: `τ_m = 1`, `ϑ = 0.5`.
    pub fn default_params(tau_s: f64) -> NeuronParams {
        NeuronParams {
            tau_m: 1.0,
            tau_s,
            threshold: 0.5,
            integrate_and_fire: false,
        }
    }

    /// Checks that every SOM fires exactly when its strongest Pyr input
    /// fires: the paired weight exceeds `ϑ_SOM` and the remaining weights of
    /// the row cannot reach it together.
    pub fn check_pairing(&self) -> Result<()> {
        let theta = self.params.threshold;
        if !(theta > 0.0) {
            return Err(Error::Config(format!("SOM threshold must be positive, got {theta}")));
        }
        for (i, row) in self.w_pys.values().rows().into_iter().enumerate() {
            let (_, paired) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::MIN), |best, (j, w)| if w > best.1 { (j, w) } else { best });
            let rest: f64 = row.sum() - paired;
            let leaks = self.params.tau_m > 1.0 && !self.params.integrate_and_fire;
            if paired < theta || rest >= theta || (leaks && rest > 0.0) {
                return Err(Error::Config(format!(
                    "SOM {i}: pairing window violated (paired weight {paired}, off-pair mass {rest}, threshold {theta})"
                )));
            }
        }
        Ok(())
    }

    /// SOM input `w_pys · s_pyr`, then one membrane/PSC step.
    pub fn step(&self, som: &mut PopulationState, pyr_spikes: &SpikeRecord) -> Result<()> {
        let input = self.w_pys.apply(pyr_spikes.as_matrix().view())?;
        som.step(input.view(), &self.params)
    }
}

/// Excitatory backward circuit of one layer: the Pyr backward projection and,
/// unless the layer cancels with PV cells (MC3), the SOM mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcBackwardCircuit {
    /// `W_←Pyr`, `targets × Pyr`.
    pub w_back_pyr: DaleMatrix,
    pub som: Option<SomMirror>,
}

impl ExcBackwardCircuit {
    pub fn new(w_back_pyr: DaleMatrix, som: Option<SomMirror>) -> Result<Self> {
        if let Some(som) = &som {
            check_shape("ExcBackwardCircuit W_←SOM", w_back_pyr.shape(), som.w_back_som.shape())?;
            let n = w_back_pyr.shape().1;
            check_shape("ExcBackwardCircuit w_pys", (n, n), som.w_pys.shape())?;
            som.check_pairing()?;
        }
        Ok(Self { w_back_pyr, som })
    }
}

/// Single-trial SOM response to a Pyr spike record, starting from rest.
pub fn som_pointwise_step(pyr_spikes: &SpikeRecord, som: &SomMirror) -> Result<SpikeRecord> {
    som.check_pairing()?;
    let mut state = PopulationState::new(pyr_spikes.trials(), som.w_pys.shape().0);
    som.step(&mut state, pyr_spikes)?;
    Ok(state.spikes)
}

/// `W_←Pyr · a_←+ + W_←SOM · a_SOM`; `a_som` is the signed (non-positive)
/// SOM PSC. Arrays are `trials × cells`.
pub fn exc_backward_current(
    circuit: &ExcBackwardCircuit,
    a_back_pyr: ArrayView2<f64>,
    a_som: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let som = circuit.som.as_ref().ok_or_else(|| {
        Error::Config("excitatory circuit has no SOM mirror".into())
    })?;
    let mut current = circuit.w_back_pyr.apply(a_back_pyr)?;
    current += &som.w_back_som.apply(a_som)?;
    Ok(current)
}

/// Fixed synapses and biases of the disinhibition circuit. Both auxiliary
/// cells have `τ_m = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mc1Params {
    pub w_pvs: f64,
    pub w_spy: f64,
    pub bias_som: f64,
    pub bias_pyr: f64,
    pub som_threshold: f64,
    pub pyr_threshold: f64,
}

impl Default for Mc1Params {
    fn default() -> Self {
        Self {
            w_pvs: 1.0,
            w_spy: 1.0,
            bias_som: 1.0,
            bias_pyr: 1.0,
            som_threshold: 0.5,
            pyr_threshold: 0.5,
        }
    }
}

impl Mc1Params {
    /// `w_pvs·(-1) + I_bias(SOM) < ϑ_SOM < I_bias(SOM)` and the same for the
    /// auxiliary Pyr cell.
    pub fn validate(&self) -> Result<()> {
        let window = |name: &str, w: f64, bias: f64, theta: f64| {
            if w < 0.0 || !(bias - w < theta && theta < bias) || theta <= 0.0 {
                Err(Error::Config(format!(
                    "MC1 {name}: need {w}·(-1) + {bias} < ϑ={theta} < {bias}"
                )))
            } else {
                Ok(())
            }
        };
        window("SOM", self.w_pvs, self.bias_som, self.som_threshold)?;
        window("Pyr(PV)", self.w_spy, self.bias_pyr, self.pyr_threshold)
    }

    fn som_params(&self) -> NeuronParams {
        NeuronParams {
            tau_m: 1.0,
            tau_s: 1.0,
            threshold: self.som_threshold,
            integrate_and_fire: false,
        }
    }

    fn pyr_params(&self, tau_s: f64) -> NeuronParams {
        NeuronParams {
            tau_m: 1.0,
            tau_s,
            threshold: self.pyr_threshold,
            integrate_and_fire: false,
        }
    }
}

/// Auxiliary SOM(PV) and Pyr(PV) populations of MC1.
#[derive(Debug, Clone)]
pub struct Mc1State {
    pub som: PopulationState,
    pub pyr: PopulationState,
}

impl Mc1State {
    pub fn new(trials: usize, n_pv: usize) -> Self {
        Self {
            som: PopulationState::new(trials, n_pv),
            pyr: PopulationState::new(trials, n_pv),
        }
    }
}

/// One MC1 step, evaluated PV → SOM → Pyr(PV) within the step. `tau_s` is
/// the backward synapse constant of the auxiliary Pyr cells (equal to the
/// PV cells'). Returns the SOM and Pyr(PV) spikes.
pub fn inh_mc1_step(
    pv_spikes: &SpikeRecord,
    params: &Mc1Params,
    tau_s: f64,
    state: &mut Mc1State,
) -> Result<(SpikeRecord, SpikeRecord)> {
    let som_in = pv_spikes
        .as_matrix()
        .mapv(|s| -params.w_pvs * s + params.bias_som);
    state.som.step(som_in.view(), &params.som_params())?;
    let pyr_in = state
        .som
        .spikes
        .as_matrix()
        .mapv(|s| -params.w_spy * s + params.bias_pyr);
    state.pyr.step(pyr_in.view(), &params.pyr_params(tau_s))?;
    Ok((state.som.spikes.clone(), state.pyr.spikes.clone()))
}

/// Fixed Pyr→PV pairing of MC2/MC3 and the autapse constants of MC2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairParams {
    pub w_pypv: f64,
    pub pv_threshold: f64,
    /// Converged common value of `w_PVPy` and `w_PyPy`.
    pub w_au: f64,
    /// Constant surrogate slope of the integrate-and-fire PV cell.
    pub pv_slope: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            w_pypv: 1.0,
            pv_threshold: 0.9,
            w_au: 1.0,
            pv_slope: 1.0,
        }
    }
}

impl PairParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pv_threshold > 0.0) || self.w_pypv < self.pv_threshold {
            return Err(Error::Config(format!(
                "paired PV needs 0 < ϑ_PV ≤ w_pypv, got ϑ_PV={} w_pypv={}",
                self.pv_threshold, self.w_pypv
            )));
        }
        if !self.w_au.is_finite() || !self.pv_slope.is_finite() {
            return Err(Error::Config("w_au and pv_slope must be finite".into()));
        }
        Ok(())
    }

    /// Integrate-and-fire PV cell with the given output `tau_s`.
    pub fn pv_params(&self, tau_s: f64) -> NeuronParams {
        NeuronParams {
            tau_m: 1.0,
            tau_s,
            threshold: self.pv_threshold,
            integrate_and_fire: true,
        }
    }
}

/// PV step driven only by its paired Pyr cell, plus an optional extra
/// current (apical injection in spiking experiments).
pub fn pv_pair_step(
    pv: &mut PopulationState,
    pyr_spikes: &SpikeRecord,
    params: &PairParams,
    tau_s: f64,
    extra: Option<ArrayView2<f64>>,
) -> Result<()> {
    let mut input = pyr_spikes.as_matrix().mapv(|s| params.w_pypv * s);
    if let Some(extra) = extra {
        check_shape("pv_pair_step", input.dim(), extra.dim())?;
        input += &extra;
    }
    pv.step(input.view(), &params.pv_params(tau_s))
}

/// Number of (trial, cell) positions where paired spike records differ.
pub fn desync_count(pyr: &SpikeRecord, pv: &SpikeRecord) -> usize {
    Zip::from(pyr.as_matrix())
        .and(pv.as_matrix())
        .fold(0, |n, &a, &b| n + (a != b) as usize)
}

/// MC2 apical merge `I_a(Pyr) - w_au·σ'(u_PV)·I_a(PV)` with the constant PV
/// slope.
pub fn mc2_apical_merge(
    apical_pyr: ArrayView2<f64>,
    apical_pv: ArrayView2<f64>,
    params: &PairParams,
) -> Result<Array2<f64>> {
    check_shape("mc2_apical_merge", apical_pyr.dim(), apical_pv.dim())?;
    let k = params.w_au * params.pv_slope;
    let mut merged = apical_pyr.to_owned();
    merged.zip_mut_with(&apical_pv, |p, &v| *p -= k * v);
    Ok(merged)
}

/// MC2 backward signal of the Pyr cells: returns the backward PSC
/// `a_Pyr + σ'(u_Pyr)·merge` and the merged apical current. Warns when the
/// paired PV cells have fallen out of sync.
pub fn inh_mc2_backward(
    pyr: &PopulationState,
    pv: &PopulationState,
    apical_pyr: ArrayView2<f64>,
    apical_pv: ArrayView2<f64>,
    params: &PairParams,
    threshold: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let off = desync_count(&pyr.spikes, &pv.spikes);
    if off > 0 {
        warn!("MC2: {off} paired PV spikes out of sync with their Pyr cells");
    }
    let merged = mc2_apical_merge(apical_pyr, apical_pv, params)?;
    let mut back = pyr.a.clone();
    Zip::from(&mut back)
        .and(&pyr.u_pre_reset)
        .and(&merged)
        .for_each(|b, &u, &m| *b += surrogate_at(u, threshold) * m);
    Ok((back, merged))
}

/// MC3 downstream current `W_←Pyr·a_←+ + W_←PV·a_PV` with `a_pv` signed.
pub fn inh_mc3_backward(
    w_back_pyr: &DaleMatrix,
    w_back_pv: &DaleMatrix,
    a_back_pyr: ArrayView2<f64>,
    a_pv: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let mut current = w_back_pyr.apply(a_back_pyr)?;
    current += &w_back_pv.apply(a_pv)?;
    Ok(current)
}

/// Inhibitory backward wiring of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InhBackwardCircuit {
    pub variant: InhVariant,
    /// `W_←PV`: carries PV errors (MC1) or cancels the Pyr base PSC (MC3).
    pub w_back_pv: Option<DaleMatrix>,
    /// `W_←Pyr(PV)` of MC1.
    pub w_back_pair: Option<DaleMatrix>,
    pub mc1: Mc1Params,
    pub pair: PairParams,
}

impl InhBackwardCircuit {
    pub fn new(
        variant: InhVariant,
        w_back_pv: Option<DaleMatrix>,
        w_back_pair: Option<DaleMatrix>,
        mc1: Mc1Params,
        pair: PairParams,
    ) -> Result<Self> {
        match variant {
            InhVariant::Mc1 => {
                mc1.validate()?;
                match (&w_back_pv, &w_back_pair) {
                    (Some(pv), Some(pair)) => {
                        check_shape("InhBackwardCircuit W_←Pyr(PV)", pv.shape(), pair.shape())?
                    }
                    _ => {
                        return Err(Error::Config(
                            "MC1 needs both W_←PV and W_←Pyr(PV)".into(),
                        ))
                    }
                }
            }
            InhVariant::Mc2 => {
                pair.validate()?;
                if w_back_pv.is_some() || w_back_pair.is_some() {
                    return Err(Error::Config("MC2 PV cells do not project backward".into()));
                }
            }
            InhVariant::Mc3 => {
                pair.validate()?;
                if w_back_pv.is_none() || w_back_pair.is_some() {
                    return Err(Error::Config("MC3 needs W_←PV and no W_←Pyr(PV)".into()));
                }
            }
        }
        Ok(Self {
            variant,
            w_back_pv,
            w_back_pair,
            mc1,
            pair,
        })
    }
}

/// Parameters of assembly competition between a Pyr and a SOM population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyCompetitionConfig {
    /// Learning rate; the default coefficients are `a± = ±eta/2`.
    pub eta: f64,
    /// Coefficient for co-firing pairs.
    pub a_plus: f64,
    /// Coefficient for every other pair.
    pub a_minus: f64,
    pub w_max: f64,
    /// Bernoulli firing probability of the stimulated Pyr cells.
    pub p_fire: f64,
    pub som_threshold: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for AssemblyCompetitionConfig {
    fn default() -> Self {
        Self::with_eta(0.1)
    }
}

impl AssemblyCompetitionConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self {
            eta,
            a_plus: eta / 2.0,
            a_minus: -eta / 2.0,
            w_max: 1.0,
            p_fire: 0.02,
            som_threshold: 1.0,
            sinkhorn_iters: 50,
            sinkhorn_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("assembly eta must be positive, got {}", self.eta)));
        }
        if !(self.p_fire > 0.0 && self.p_fire < 1.0) {
            return Err(Error::Config(format!("p_fire must lie in (0, 1), got {}", self.p_fire)));
        }
        if !(self.som_threshold > 0.0) || self.w_max < self.som_threshold {
            return Err(Error::Config(format!(
                "need w_max ≥ ϑ_SOM > 0, got w_max={} ϑ={}",
                self.w_max, self.som_threshold
            )));
        }
        Ok(())
    }
}

/// SOM response during assembly competition (`τ_m = τ_s = 1`): SOM `i`
/// fires iff `Σ_j w_ij s_j ≥ ϑ`.
pub fn assembly_som_response(
    w_pys: &DaleMatrix,
    pyr_spikes: &SpikeRecord,
    threshold: f64,
) -> Result<SpikeRecord> {
    let drive = w_pys.apply(pyr_spikes.as_matrix().view())?;
    SpikeRecord::from_matrix(drive.mapv(|u| if u >= threshold { 1.0 } else { 0.0 }))
}

/// Soft-bounded Hebbian step without normalization. Spike records are
/// single-trial (`1 × n`). `Δw_ij = a±·w_ij·(w_max - w_ij)` with `a+` when
/// SOM `i` and Pyr `j` fired together.
pub fn soft_bounded_step(
    w_pys: &DaleMatrix,
    pyr_spikes: &SpikeRecord,
    som_spikes: &SpikeRecord,
    cfg: &AssemblyCompetitionConfig,
) -> Result<DaleMatrix> {
    let (n_som, n_pyr) = w_pys.shape();
    check_shape("assembly pyr spikes", (1, n_pyr), pyr_spikes.as_matrix().dim())?;
    check_shape("assembly som spikes", (1, n_som), som_spikes.as_matrix().dim())?;
    let pyr = pyr_spikes.as_matrix().row(0);
    let som = som_spikes.as_matrix().row(0);
    let w_max = cfg.w_max;
    let mut w = w_pys.clone();
    w.update(|v| {
        for ((i, j), x) in v.indexed_iter_mut() {
            let coef = if som[i] > 0.0 && pyr[j] > 0.0 { cfg.a_plus } else { cfg.a_minus };
            *x += coef * *x * (w_max - *x);
        }
    })?;
    Ok(w)
}

/// [`soft_bounded_step`] followed by dual-sum normalization to `w_max`.
pub fn assembly_competition_update(
    w_pys: &DaleMatrix,
    pyr_spikes: &SpikeRecord,
    som_spikes: &SpikeRecord,
    cfg: &AssemblyCompetitionConfig,
) -> Result<DaleMatrix> {
    let w = soft_bounded_step(w_pys, pyr_spikes, som_spikes, cfg)?;
    doubly_normalize(&w, cfg.w_max, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
}

/// Bernoulli stimulation of `n` Pyr cells.
pub fn bernoulli_spikes<R: Rng + ?Sized>(rng: &mut R, n: usize, p: f64) -> SpikeRecord {
    let bits: Vec<u8> = (0..n).map(|_| rng.random_bool(p) as u8).collect();
    SpikeRecord::from_bits(&bits)
}

/// If thresholding at `w_max / 2` gives a permutation matrix, returns the
/// Pyr index paired with each SOM row.
pub fn permutation_of(w: &DaleMatrix, w_max: f64) -> Option<Vec<usize>> {
    let (rows, cols) = w.shape();
    if rows != cols {
        return None;
    }
    let mut col_used = vec![false; cols];
    let mut perm = Vec::with_capacity(rows);
    for row in w.values().rows() {
        let strong: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &x)| x > w_max / 2.0)
            .map(|(j, _)| j)
            .collect();
        if strong.len() != 1 || col_used[strong[0]] {
            return None;
        }
        col_used[strong[0]] = true;
        perm.push(strong[0]);
    }
    Some(perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dale::{InitVariant, PreSign};
    use crate::neuron::CellSign;
    use crate::rng::{substream, Stream};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2, Axis};
    use proptest::prelude::*;
    use rand::Rng;

    fn identity(name: &str, n: usize) -> DaleMatrix {
        DaleMatrix::new(name, PreSign::Excitatory, Array2::eye(n)).unwrap()
    }

    fn mirror(n: usize) -> SomMirror {
        SomMirror {
            w_pys: identity("w_pys", n),
            w_back_som: DaleMatrix::zeros("w_back_som", PreSign::Inhibitory, (n, n)),
            params: SomMirror::default_params(2.0),
        }
    }

    fn som_train(pattern: &[Vec<u8>]) -> Vec<Vec<u8>> {
        let m = mirror(pattern[0].len());
        let mut state = PopulationState::new(1, pattern[0].len());
        pattern
            .iter()
            .map(|bits| {
                m.step(&mut state, &SpikeRecord::from_bits(bits)).unwrap();
                state.spikes.row_bits(0)
            })
            .collect()
    }

    #[test]
    fn som_mirrors_single_pyr() {
        let pattern: Vec<Vec<u8>> = [1, 0, 1, 1].iter().map(|&b| vec![b]).collect();
        assert_eq!(som_train(&pattern), pattern);
        let silent = vec![vec![0u8]; 4];
        assert_eq!(som_train(&silent), silent);
    }

    #[test]
    fn som_mirrors_each_own_pyr() {
        let pattern = vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 0], vec![0, 1]];
        assert_eq!(som_train(&pattern), pattern);
        let single = som_pointwise_step(&SpikeRecord::from_bits(&[0, 1]), &mirror(2)).unwrap();
        assert_eq!(single.row_bits(0), vec![0, 1]);
    }

    #[test]
    fn pairing_window_is_checked() {
        let mut m = mirror(2);
        m.params.threshold = 1.5;
        assert!(m.check_pairing().is_err());
        m.params.threshold = 0.0;
        assert!(m.check_pairing().is_err());
        let mut m = mirror(2);
        m.w_pys = DaleMatrix::new("w_pys", PreSign::Excitatory, array![[1.0, 0.6], [0.0, 1.0]]).unwrap();
        assert!(m.check_pairing().is_err());
    }

    fn circuit(w_pyr: Array2<f64>, w_som: Array2<f64>) -> ExcBackwardCircuit {
        let n = w_pyr.ncols();
        let mut som = mirror(n);
        som.w_back_som = DaleMatrix::new("w_back_som", PreSign::Inhibitory, w_som).unwrap();
        ExcBackwardCircuit::new(
            DaleMatrix::new("w_back_pyr", PreSign::Excitatory, w_pyr).unwrap(),
            Some(som),
        )
        .unwrap()
    }

    #[test]
    fn exc_backward_examples() {
        let b = array![[0.2, 0.5], [0.7, 0.1], [0.3, 0.3]];
        let c = circuit(b.clone(), b.clone());
        let a_b = array![[0.5, 0.25]];
        let zero = exc_backward_current(&c, a_b.view(), (-&a_b).view()).unwrap();
        assert_abs_diff_eq!(zero, Array2::zeros((1, 3)), epsilon = 1e-15);

        let e = array![[0.1, -0.3]];
        let cur = exc_backward_current(&c, (&a_b + &e).view(), (-&a_b).view()).unwrap();
        assert_abs_diff_eq!(cur, e.dot(&b.t()), epsilon = 1e-15);

        let delta = array![[0.1, 0.0], [0.0, 0.2], [0.05, 0.05]];
        let c = circuit(b.clone(), &b + &delta);
        let residual = exc_backward_current(&c, a_b.view(), (-&a_b).view()).unwrap();
        assert_abs_diff_eq!(residual, -a_b.dot(&delta.t()), epsilon = 1e-15);
    }

    fn mc1_run(pv: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut state = Mc1State::new(1, 1);
        let mut som = Vec::new();
        let mut pyr = Vec::new();
        for &b in pv {
            let (s, p) = inh_mc1_step(&SpikeRecord::from_bits(&[b]), &Mc1Params::default(), 2.0, &mut state)
                .unwrap();
            som.push(s.row_bits(0)[0]);
            pyr.push(p.row_bits(0)[0]);
        }
        (som, pyr)
    }

    #[test]
    fn mc1_disinhibition_examples() {
        assert_eq!(mc1_run(&[0, 1, 0, 0, 1]), (vec![1, 0, 1, 1, 0], vec![0, 1, 0, 0, 1]));
        assert_eq!(mc1_run(&[0; 4]), (vec![1; 4], vec![0; 4]));
        assert_eq!(mc1_run(&[1; 4]), (vec![0; 4], vec![1; 4]));
    }

    #[test]
    fn mc1_window_is_checked() {
        let bad = Mc1Params {
            som_threshold: 1.2,
            ..Mc1Params::default()
        };
        assert!(bad.validate().is_err());
        let bad = Mc1Params {
            w_spy: 0.2,
            ..Mc1Params::default()
        };
        assert!(bad.validate().is_err());
        assert!(Mc1Params::default().validate().is_ok());
    }

    #[test]
    fn mc2_zero_error_gives_forward_psc() {
        let params = PairParams::default();
        let mut pyr = PopulationState::new(1, 3);
        pyr.step(array![[1.5, 0.2, 1.0]].view(), &NeuronParams::default()).unwrap();
        let mut pv = PopulationState::new(1, 3);
        pv_pair_step(&mut pv, &pyr.spikes, &params, 2.0, None).unwrap();
        assert_eq!(pv.spikes, pyr.spikes);
        let zero = Array2::zeros((1, 3));
        let (back, merged) = inh_mc2_backward(&pyr, &pv, zero.view(), zero.view(), &params, 1.0).unwrap();
        assert_eq!(back, pyr.a);
        assert_eq!(merged, zero);
    }

    #[test]
    fn mc2_merge_subtracts_scaled_pv_error() {
        let params = PairParams {
            w_au: 0.5,
            pv_slope: 0.8,
            ..PairParams::default()
        };
        let merged = mc2_apical_merge(array![[1.0, -2.0]].view(), array![[0.5, 1.0]].view(), &params).unwrap();
        assert_abs_diff_eq!(merged, array![[0.8, -2.4]], epsilon = 1e-15);
    }

    #[test]
    fn mc3_examples() {
        let b = DaleMatrix::new("w_back_pyr", PreSign::Excitatory, array![[0.4, 0.2], [0.1, 0.9]]).unwrap();
        let a = array![[0.5, 0.75]];
        let zero = inh_mc3_backward(&b, &b.clone(), a.view(), (-&a).view()).unwrap();
        assert_abs_diff_eq!(zero, Array2::zeros((1, 2)), epsilon = 1e-15);

        let e = array![[0.2, -0.1]];
        let cur = inh_mc3_backward(&b, &b.clone(), (&a + &e).view(), (-&a).view()).unwrap();
        assert_abs_diff_eq!(cur, e.dot(&b.values().t()), epsilon = 1e-15);

        let delta = array![[0.0, 0.3], [0.1, 0.0]];
        let pv = DaleMatrix::new("w_back_pv", PreSign::Inhibitory, b.values() + &delta).unwrap();
        let residual = inh_mc3_backward(&b, &pv, a.view(), (-&a).view()).unwrap();
        assert_abs_diff_eq!(residual, -a.dot(&delta.t()), epsilon = 1e-15);
    }

    #[test]
    fn inh_circuit_wiring_is_checked() {
        let m = DaleMatrix::zeros("w", PreSign::Inhibitory, (2, 2));
        assert!(InhBackwardCircuit::new(InhVariant::Mc2, Some(m.clone()), None, Mc1Params::default(), PairParams::default()).is_err());
        assert!(InhBackwardCircuit::new(InhVariant::Mc3, Some(m.clone()), None, Mc1Params::default(), PairParams::default()).is_ok());
        assert!(InhBackwardCircuit::new(InhVariant::Mc1, Some(m), None, Mc1Params::default(), PairParams::default()).is_err());
    }

    #[test]
    fn soft_bounds_freeze_extremes() {
        let cfg = AssemblyCompetitionConfig::default();
        let w = DaleMatrix::new("w_pys", PreSign::Excitatory, array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let fire = SpikeRecord::from_bits(&[1, 1]);
        let out = assembly_competition_update(&w, &fire, &fire, &cfg).unwrap();
        assert_eq!(out, w);
        let silent = SpikeRecord::from_bits(&[0, 0]);
        let out = assembly_competition_update(&w, &silent, &silent, &cfg).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn assembly_forms_permutation_small() {
        let cfg = AssemblyCompetitionConfig::default();
        let mut rng = substream(5, Stream::Init, 0);
        let init = DaleMatrix::new(
            "w_pys",
            PreSign::Excitatory,
            Array2::from_shape_fn((10, 10), |_| rng.random_range(0.0..cfg.w_max)),
        )
        .unwrap();
        let mut w = doubly_normalize(&init, cfg.w_max, cfg.sinkhorn_iters, cfg.sinkhorn_tol).unwrap();
        let mut stim = substream(5, Stream::Stimulation, 0);
        for _ in 0..5000 {
            let pyr = bernoulli_spikes(&mut stim, 10, cfg.p_fire);
            let som = assembly_som_response(&w, &pyr, cfg.som_threshold).unwrap();
            w = assembly_competition_update(&w, &pyr, &som, &cfg).unwrap();
        }
        assert!(permutation_of(&w, cfg.w_max).is_some());
        for s in w.values().sum_axis(Axis(0)).iter().chain(w.values().sum_axis(Axis(1)).iter()) {
            assert!((s - cfg.w_max).abs() < 1e-3);
        }
    }

    #[test]
    fn permutation_detection() {
        let p = DaleMatrix::new("w", PreSign::Excitatory, array![[0.1, 0.9], [0.9, 0.1]]).unwrap();
        assert_eq!(permutation_of(&p, 1.0), Some(vec![1, 0]));
        let q = DaleMatrix::new("w", PreSign::Excitatory, array![[0.1, 0.9], [0.1, 0.9]]).unwrap();
        assert_eq!(permutation_of(&q, 1.0), None);
    }

    #[test]
    fn assembly_config_validation() {
        assert!(AssemblyCompetitionConfig::default().validate().is_ok());
        let bad = AssemblyCompetitionConfig { p_fire: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AssemblyCompetitionConfig { w_max: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn spike_patterns() -> impl Strategy<Value = Vec<Vec<u8>>> {
        (1usize..6).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0u8..2, n), 1..25))
    }

    proptest! {
        #[test]
        fn som_mirror_holds(pattern in spike_patterns()) {
            prop_assert_eq!(som_train(&pattern), pattern);
        }

        #[test]
        fn cancellation_at_every_step(pattern in spike_patterns(), seed in 0u64..200) {
            let n = pattern[0].len();
            let b = DaleMatrix::init_kaiming_seeded("b", (4, n), InitVariant::Uniform, PreSign::Excitatory, seed).unwrap();
            let c = circuit(b.values().clone(), b.values().clone());
            let som = c.som.as_ref().unwrap();
            let mut pyr = PopulationState::new(1, n);
            let mut som_state = PopulationState::new(1, n);
            for bits in &pattern {
                let s = SpikeRecord::from_bits(bits);
                step_trace(&mut pyr, &s, 2.0);
                som.step(&mut som_state, &s).unwrap();
                let cur = exc_backward_current(&c, pyr.a.view(), som_state.emitted(CellSign::Inhibitory).view()).unwrap();
                prop_assert!(cur.iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn mc1_logic_holds(pv in prop::collection::vec(0u8..2, 1..40)) {
            let (som, pyr) = mc1_run(&pv);
            prop_assert_eq!(&pyr, &pv);
            prop_assert!(som.iter().zip(&pv).all(|(s, p)| s + p == 1));
        }

        #[test]
        fn paired_pv_stays_in_sync(pattern in spike_patterns()) {
            let n = pattern[0].len();
            let params = PairParams::default();
            let mut pv = PopulationState::new(1, n);
            for bits in &pattern {
                let s = SpikeRecord::from_bits(bits);
                pv_pair_step(&mut pv, &s, &params, 2.0, None).unwrap();
                prop_assert_eq!(desync_count(&s, &pv.spikes), 0);
            }
        }

        #[test]
        fn assembly_soft_bound(seed in 0u64..100, w_max in 1.0f64..3.0) {
            let cfg = AssemblyCompetitionConfig { w_max, som_threshold: 1.0, ..Default::default() };
            let mut rng = substream(seed, Stream::Init, 0);
            let mut w = DaleMatrix::new(
                "w_pys",
                PreSign::Excitatory,
                Array2::from_shape_fn((6, 6), |_| rng.random_range(0.01..w_max)),
            ).unwrap();
            w = doubly_normalize(&w, w_max, 50, 1e-9).unwrap();
            for _ in 0..50 {
                let pyr = bernoulli_spikes(&mut rng, 6, 0.3);
                let som = assembly_som_response(&w, &pyr, cfg.som_threshold).unwrap();
                let raw = soft_bounded_step(&w, &pyr, &som, &cfg).unwrap();
                prop_assert!(raw.values().iter().all(|&x| (0.0..=w_max).contains(&x)));
                w = doubly_normalize(&raw, w_max, 50, 1e-9).unwrap();
            }
        }
    }

    fn step_trace(pop: &mut PopulationState, spikes: &SpikeRecord, tau_s: f64) {
        crate::neuron::step_psc(&mut pop.a, spikes, tau_s, CellSign::Excitatory).unwrap();
        pop.spikes = spikes.clone();
    }
}
