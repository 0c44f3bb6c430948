//! 20-step waveforms of the three backward microcircuits, regression-checked
//! against golden CSVs, plus randomized checks of each circuit's logic.

use std::path::Path;

use dalebp_core::microcircuits::{
    bernoulli_spikes, inh_mc1_step, pv_pair_step, Mc1Params, Mc1State, PairParams, SomMirror,
};
use dalebp_core::rng::{substream, Stream};
use dalebp_core::{CellSign, DaleMatrix, NeuronParams, PopulationState, PreSign, SpikeRecord};
use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::config::TracesConfig;
use crate::error::{HarnessError, Result};
use crate::experiments::Sink;
use crate::output::{fmt_f64, read_csv};

pub const STEPS: usize = 20;
pub const TAU_S: f64 = 2.0;
pub const HEADER: [&str; 7] = ["step", "cell_id", "cell_type", "u", "spike", "psc", "I_a"];
pub const CIRCUITS: [&str; 3] = ["exc", "mc1", "mc2"];

/// Backward weight onto the apical target used by the waveform circuits.
const W_BACK: f64 = 0.8;
/// Period in steps of the injected sinusoid.
const PERIOD: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub cell_id: usize,
    pub cell_type: &'static str,
    pub u: f64,
    pub spike: f64,
    pub psc: f64,
    pub i_a: f64,
}

impl TraceRow {
    fn fields(&self) -> [String; 7] {
        [
            self.step.to_string(),
            self.cell_id.to_string(),
            self.cell_type.to_string(),
            fmt_f64(self.u),
            fmt_f64(self.spike),
            fmt_f64(self.psc),
            fmt_f64(self.i_a),
        ]
    }
}

fn row(step: usize, cell_id: usize, cell_type: &'static str, p: &PopulationState, sign: CellSign, i_a: f64) -> TraceRow {
    TraceRow {
        step,
        cell_id,
        cell_type,
        u: p.u_pre_reset[[0, 0]],
        spike: p.spikes.as_matrix()[[0, 0]],
        psc: sign.value() * p.a[[0, 0]],
        i_a,
    }
}

fn apical_row(step: usize, cell_id: usize, i_a: f64) -> TraceRow {
    TraceRow {
        step,
        cell_id,
        cell_type: "apical_target",
        u: 0.0,
        spike: 0.0,
        psc: 0.0,
        i_a,
    }
}

/// `sin x` from a fixed polynomial, so traces do not depend on the
/// platform's libm.
pub fn sine(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let x = x - two_pi * (x / two_pi).round();
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for k in 1..12 {
        let k = k as f64;
        term *= -x2 / ((2.0 * k) * (2.0 * k + 1.0));
        sum += term;
    }
    sum
}

fn drive(seed: u64, index: u64) -> Vec<f64> {
    let mut rng = substream(seed, Stream::Stimulation, index);
    (0..STEPS).map(|_| rng.random_range(0.0..1.5)).collect()
}

fn one(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

fn lif() -> NeuronParams {
    NeuronParams {
        tau_s: TAU_S,
        ..NeuronParams::default()
    }
}

/// Pyr cell, its SOM mirror, and the apical current they jointly deliver
/// to one target through equal backward weights.
pub fn exc_trace(stimulus_seed: u64) -> Result<Vec<TraceRow>> {
    let mirror = SomMirror {
        w_pys: DaleMatrix::new("w_pys", PreSign::Excitatory, one(1.0))?,
        w_back_som: DaleMatrix::new("w_back_som", PreSign::Inhibitory, one(W_BACK))?,
        params: SomMirror::default_params(TAU_S),
    };
    let mut pyr = PopulationState::new(1, 1);
    let mut som = PopulationState::new(1, 1);
    let mut rows = Vec::new();
    for (t, x) in drive(stimulus_seed, 0).into_iter().enumerate() {
        pyr.step(one(x).view(), &lif())?;
        mirror.step(&mut som, &pyr.spikes)?;
        let i_a = W_BACK * pyr.a[[0, 0]] + mirror.w_back_som.apply(som.emitted(CellSign::Inhibitory).view())?[[0, 0]];
        rows.push(row(t, 0, "pyr", &pyr, CellSign::Excitatory, 0.0));
        rows.push(row(t, 1, "som", &som, CellSign::Inhibitory, 0.0));
        rows.push(apical_row(t, 2, i_a));
    }
    Ok(rows)
}

/// PV cell with the disinhibition chain; the auxiliary Pyr cell cancels
/// the PV base PSC at the apical target.
pub fn mc1_trace(stimulus_seed: u64) -> Result<Vec<TraceRow>> {
    let params = Mc1Params::default();
    let mut pv = PopulationState::new(1, 1);
    let mut state = Mc1State::new(1, 1);
    let mut rows = Vec::new();
    for (t, x) in drive(stimulus_seed, 1).into_iter().enumerate() {
        pv.step(one(x).view(), &lif())?;
        inh_mc1_step(&pv.spikes, &params, TAU_S, &mut state)?;
        let i_a = W_BACK * (state.pyr.a[[0, 0]] - pv.a[[0, 0]]);
        rows.push(row(t, 0, "pv", &pv, CellSign::Inhibitory, 0.0));
        rows.push(row(t, 1, "som_pv", &state.som, CellSign::Inhibitory, 0.0));
        rows.push(row(t, 2, "pyr_pv", &state.pyr, CellSign::Excitatory, 0.0));
        rows.push(apical_row(t, 3, i_a));
    }
    Ok(rows)
}

/// Pyr cell with its paired PV cell, run twice: once clean and once with a
/// sinusoid injected into the PV membrane.
fn mc2_pair(drive: &[f64], amplitude: f64, phase: f64) -> Result<Vec<(PopulationState, PopulationState, PopulationState, f64)>> {
    let pair = PairParams::default();
    let mut pyr = PopulationState::new(1, 1);
    let mut clean = PopulationState::new(1, 1);
    let mut injected = PopulationState::new(1, 1);
    let mut out = Vec::with_capacity(drive.len());
    for (t, &x) in drive.iter().enumerate() {
        let inj = amplitude * sine(2.0 * std::f64::consts::PI * t as f64 / PERIOD + phase);
        pyr.step(one(x).view(), &lif())?;
        pv_pair_step(&mut clean, &pyr.spikes, &pair, TAU_S, None)?;
        pv_pair_step(&mut injected, &pyr.spikes, &pair, TAU_S, Some(one(inj).view()))?;
        out.push((pyr.clone(), clean.clone(), injected.clone(), inj));
    }
    Ok(out)
}

pub fn mc2_trace(stimulus_seed: u64, amplitude: f64) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for (t, (pyr, clean, injected, inj)) in mc2_pair(&drive(stimulus_seed, 2), amplitude, 0.0)?.into_iter().enumerate() {
        rows.push(row(t, 0, "pyr", &pyr, CellSign::Excitatory, 0.0));
        rows.push(row(t, 1, "pv", &clean, CellSign::Inhibitory, 0.0));
        rows.push(row(t, 2, "pv_injected", &injected, CellSign::Inhibitory, inj));
    }
    Ok(rows)
}

pub fn circuit_rows(circuit: &str, cfg: &TracesConfig) -> Result<Vec<TraceRow>> {
    match circuit {
        "exc" => exc_trace(cfg.stimulus_seed),
        "mc1" => mc1_trace(cfg.stimulus_seed),
        "mc2" => mc2_trace(cfg.stimulus_seed, cfg.mc2_amplitude),
        other => Err(HarnessError::Config(format!("unknown circuit {other:?}"))),
    }
}

pub fn file_name(circuit: &str) -> String {
    format!("traces_{circuit}.csv")
}

/// Compares rows against a golden CSV (data rows only). Names the first
/// divergent `(step, cell)`.
pub fn compare_golden(circuit: &str, rows: &[TraceRow], golden: &Path) -> Result<()> {
    let (_, header, want) = read_csv(golden)?;
    if header != HEADER {
        return Err(HarnessError::TraceMismatch(format!("{}: header {header:?}", golden.display())));
    }
    for (i, r) in rows.iter().enumerate() {
        let got = r.fields();
        match want.get(i) {
            Some(w) if w[..] == got[..] => {}
            Some(w) => {
                let col = HEADER
                    .iter()
                    .zip(w.iter().zip(&got))
                    .find(|(_, (a, b))| a != b)
                    .map_or("row", |(h, _)| *h);
                return Err(HarnessError::TraceMismatch(format!(
                    "{circuit}: first divergence at step {} cell {} ({}): {col} golden {:?} vs {:?}",
                    r.step,
                    r.cell_id,
                    r.cell_type,
                    w,
                    got
                )));
            }
            None => {
                return Err(HarnessError::TraceMismatch(format!(
                    "{circuit}: golden ends before step {} cell {}",
                    r.step, r.cell_id
                )))
            }
        }
    }
    if want.len() != rows.len() {
        return Err(HarnessError::TraceMismatch(format!(
            "{circuit}: golden has {} rows, simulation {}",
            want.len(),
            rows.len()
        )));
    }
    Ok(())
}

/// Counts of random patterns (out of `patterns`) for which each circuit
/// property holds at every step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCounts {
    pub patterns: usize,
    pub som_mirror: usize,
    pub disinhibition: usize,
    pub pyr_pv_sync: usize,
}

fn random_patterns(seed: u64, index: u64, cells: usize) -> Vec<SpikeRecord> {
    let mut rng = substream(seed, Stream::Stimulation, index);
    let p = rng.random_range(0.05..0.95);
    (0..STEPS).map(|_| bernoulli_spikes(&mut rng, cells, p)).collect()
}

pub fn property_checks(patterns: usize, seed: u64) -> Result<PropertyCounts> {
    const CELLS: usize = 8;
    let mirror = SomMirror {
        w_pys: DaleMatrix::new("w_pys", PreSign::Excitatory, Array2::eye(CELLS))?,
        w_back_som: DaleMatrix::new("w_back_som", PreSign::Inhibitory, Array2::eye(CELLS))?,
        params: SomMirror::default_params(TAU_S),
    };
    let mc1 = Mc1Params::default();
    let pair = PairParams::default();
    let mut counts = PropertyCounts {
        patterns,
        som_mirror: 0,
        disinhibition: 0,
        pyr_pv_sync: 0,
    };
    for k in 0..patterns {
        let trains = random_patterns(seed, 1000 + k as u64, CELLS);

        let mut som = PopulationState::new(1, CELLS);
        let mut ok = true;
        for s in &trains {
            mirror.step(&mut som, s)?;
            ok &= som.spikes == *s;
        }
        counts.som_mirror += ok as usize;

        let mut state = Mc1State::new(1, CELLS);
        let mut ok = true;
        for s in &trains {
            let (som_s, pyr_s) = inh_mc1_step(s, &mc1, TAU_S, &mut state)?;
            ok &= pyr_s == *s;
            ok &= som_s.as_matrix().iter().zip(s.as_matrix()).all(|(a, b)| a + b == 1.0);
        }
        counts.disinhibition += ok as usize;

        let mut pv = PopulationState::new(1, CELLS);
        let mut ok = true;
        for s in &trains {
            pv_pair_step(&mut pv, s, &pair, TAU_S, None)?;
            ok &= pv.spikes == *s;
        }
        counts.pyr_pv_sync += ok as usize;
    }
    Ok(counts)
}

/// Injected-error response of the MC2 PV cell over repeated random runs:
/// regression slope of the signed PSC change on the injected current,
/// overall and per bin of `u_PV`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mc2Response {
    pub repeats: usize,
    pub correlation: f64,
    /// `(u_lo, u_hi, slope, samples)`.
    pub slope_by_u: Vec<(f64, f64, f64, usize)>,
}

pub fn mc2_response(repeats: usize, amplitude: f64, seed: u64) -> Result<Mc2Response> {
    const BIN: f64 = 0.25;
    const LO: f64 = -1.0;
    const BINS: usize = 10;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut bins = vec![(0.0, 0.0, 0usize); BINS];
    for r in 0..repeats {
        let mut rng = substream(seed, Stream::Stimulation, 10_000 + r as u64);
        let drive: Vec<f64> = (0..STEPS).map(|_| rng.random_range(0.0..1.5)).collect();
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        for (_, clean, injected, inj) in mc2_pair(&drive, amplitude, phase)? {
            let dy = -(injected.a[[0, 0]] - clean.a[[0, 0]]);
            xs.push(inj);
            ys.push(dy);
            let u = injected.u_pre_reset[[0, 0]];
            let k = ((u - LO) / BIN).floor();
            if k >= 0.0 && (k as usize) < BINS {
                let b = &mut bins[k as usize];
                b.0 += inj * dy;
                b.1 += inj * inj;
                b.2 += 1;
            }
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let correlation = if vx > 0.0 && vy > 0.0 { cov / (vx * vy).sqrt() } else { 0.0 };
    let slope_by_u = bins
        .iter()
        .enumerate()
        .filter(|(_, b)| b.1 > 0.0)
        .map(|(k, b)| (LO + BIN * k as f64, LO + BIN * (k + 1) as f64, b.0 / b.1, b.2))
        .collect();
    Ok(Mc2Response {
        repeats,
        correlation,
        slope_by_u,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TracesReport {
    /// Per circuit: `None` if it matches its golden file, else the mismatch.
    pub golden: Vec<(String, Option<String>)>,
    pub properties: PropertyCounts,
    pub mc2: Mc2Response,
}

impl TracesReport {
    pub fn golden_ok(&self) -> bool {
        self.golden.iter().all(|(_, e)| e.is_none())
    }
}

/// Writes freshly simulated traces over the golden files.
pub fn bless(cfg: &TracesConfig) -> Result<()> {
    let sink = Sink::new(&cfg.golden_dir, "golden");
    for c in CIRCUITS {
        write_rows(&sink, c, &circuit_rows(c, cfg)?)?;
    }
    Ok(())
}

fn write_rows(sink: &Sink, circuit: &str, rows: &[TraceRow]) -> Result<()> {
    if let Some(mut csv) = sink.csv(&file_name(circuit), &HEADER)? {
        for r in rows {
            csv.row(r.fields())?;
        }
        csv.finish()?;
    }
    Ok(())
}

/// Golden comparison only.
pub fn verify(cfg: &TracesConfig) -> Result<()> {
    for c in CIRCUITS {
        compare_golden(c, &circuit_rows(c, cfg)?, &cfg.golden_dir.join(file_name(c)))?;
    }
    Ok(())
}

pub fn run(cfg: &TracesConfig, seed: u64, sink: &Sink) -> Result<TracesReport> {
    let mut golden = Vec::new();
    for c in CIRCUITS {
        let rows = circuit_rows(c, cfg)?;
        write_rows(sink, c, &rows)?;
        let verdict = compare_golden(c, &rows, &cfg.golden_dir.join(file_name(c))).err();
        golden.push((c.to_string(), verdict.map(|e| e.to_string())));
    }
    let properties = property_checks(cfg.property_patterns, seed)?;
    let mc2 = mc2_response(cfg.mc2_repeats, cfg.mc2_amplitude, seed)?;
    if let Some(mut csv) = sink.csv("mc2_slope.csv", &["u_lo", "u_hi", "slope", "samples"])? {
        for (lo, hi, s, n) in &mc2.slope_by_u {
            csv.row([fmt_f64(*lo), fmt_f64(*hi), fmt_f64(*s), n.to_string()])?;
        }
        csv.finish()?;
    }
    let report = TracesReport {
        golden,
        properties,
        mc2,
    };
    sink.json("microcircuit_traces.json", &report)?;
    Ok(report)
}
