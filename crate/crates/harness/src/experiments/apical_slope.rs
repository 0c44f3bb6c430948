//! Single-neuron apical experiment.
//!
//! A LIF cell receives basal input from 50 mixed-sign presynaptic cells.
//! Each repeat runs it twice on the same input, once basal only and once
//! with an added apical current, and regresses the PSC change on `I_a`
//! within bins of the basal-only membrane potential. If the small-signal
//! model holds, the slope traces `σ'(u)` and peaks at `u = ϑ`.

use dalebp_core::microcircuits::bernoulli_spikes;
use dalebp_core::neuron::step_psc;
use dalebp_core::rng::{substream, Stream};
use dalebp_core::{CellSign, NeuronParams, PopulationState};
use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ApicalSlopeConfig;
use crate::error::Result;
use crate::experiments::Sink;
use crate::output::fmt_f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeBin {
    pub norm_ratio: f64,
    pub u_lo: f64,
    pub u_hi: f64,
    /// Repeats that had enough samples in this bin.
    pub repeats: usize,
    pub slope_mean: f64,
    pub slope_var: f64,
    /// Fraction of samples with `|Δa| < 1e-12` despite `I_a ≠ 0`.
    pub zero_change: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeReport {
    pub bins: Vec<SlopeBin>,
    /// Per ratio: whether the bin containing ϑ has the largest mean slope.
    pub peak_at_threshold: Vec<(f64, bool)>,
}

/// Summed mixed-sign PSC of `n` Bernoulli cells, one value per step.
fn presynaptic_current(rng: &mut impl Rng, n: usize, steps: usize, p: f64, w_max: f64, tau_s: f64) -> Array1<f64> {
    let signed: Array1<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.0..w_max)
        })
        .collect();
    let mut a = Array2::zeros((1, n));
    let mut out = Array1::zeros(steps);
    for t in 0..steps {
        let spikes = bernoulli_spikes(rng, n, p);
        step_psc(&mut a, &spikes, tau_s, CellSign::Excitatory).expect("shapes agree");
        out[t] = a.row(0).dot(&signed);
    }
    out
}

/// Per-bin accumulators of one repeat: `(Σxy, Σxx, count, zero-change count)`.
type RepeatBins = Vec<Vec<(f64, f64, usize, usize)>>;

fn one_repeat(cfg: &ApicalSlopeConfig, params: &NeuronParams, seed: u64, repeat: usize, edges: &[f64]) -> RepeatBins {
    let mut rng = substream(seed, Stream::Stimulation, repeat as u64);
    let steps = cfg.steps;
    let basal = presynaptic_current(&mut rng, cfg.n_basal, steps, cfg.p_fire, cfg.basal_weight_max, params.tau_s)
        + cfg.basal_bias;
    let apical_raw = presynaptic_current(&mut rng, cfg.n_apical, steps, cfg.p_fire, 1.0, params.tau_s);
    let norm = |x: &Array1<f64>| x.dot(x).sqrt();
    let (nb, na) = (norm(&basal), norm(&apical_raw));

    // Row 0 is basal only, row k + 1 adds the apical current at ratio k.
    let rows = cfg.norm_ratios.len() + 1;
    let apical: Vec<Array1<f64>> = cfg
        .norm_ratios
        .iter()
        .map(|&r| if na > 0.0 { &apical_raw * (r * nb / na) } else { Array1::zeros(steps) })
        .collect();
    let mut cell = PopulationState::new(rows, 1);
    let mut bins: RepeatBins = vec![vec![(0.0, 0.0, 0, 0); edges.len() - 1]; cfg.norm_ratios.len()];
    for t in 0..steps {
        let input = Array2::from_shape_fn((rows, 1), |(r, _)| basal[t] + if r == 0 { 0.0 } else { apical[r - 1][t] });
        cell.step(input.view(), params).expect("shapes agree");
        let u = cell.u_pre_reset[[0, 0]];
        let Some(k) = edges.windows(2).position(|w| u >= w[0] && u < w[1]) else {
            continue;
        };
        for (r, acc) in bins.iter_mut().enumerate() {
            let x = apical[r][t];
            let y = cell.a[[r + 1, 0]] - cell.a[[0, 0]];
            let b = &mut acc[k];
            b.0 += x * y;
            b.1 += x * x;
            b.2 += 1;
            if x != 0.0 && y.abs() < 1e-12 {
                b.3 += 1;
            }
        }
    }
    bins
}

pub fn bin_edges(cfg: &ApicalSlopeConfig, threshold: f64) -> Vec<f64> {
    (cfg.bin_min..=cfg.bin_max)
        .map(|k| threshold + cfg.bin_width * (k as f64 - 0.5))
        .collect()
}

pub fn run(cfg: &ApicalSlopeConfig, seed: u64, sink: &Sink) -> Result<SlopeReport> {
    let params = NeuronParams::default();
    let edges = bin_edges(cfg, params.threshold);
    let repeats: Vec<RepeatBins> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| one_repeat(cfg, &params, seed, r, &edges))
        .collect();

    let threshold_bin = edges
        .windows(2)
        .position(|w| params.threshold >= w[0] && params.threshold < w[1])
        .expect("bins cover the threshold");
    let mut bins = Vec::new();
    let mut peak_at_threshold = Vec::new();
    for (ri, &ratio) in cfg.norm_ratios.iter().enumerate() {
        let mut means = Vec::new();
        for k in 0..edges.len() - 1 {
            let slopes: Vec<f64> = repeats
                .iter()
                .map(|rep| rep[ri][k])
                .filter(|&(_, xx, n, _)| n >= cfg.min_points && xx > 0.0)
                .map(|(xy, xx, _, _)| xy / xx)
                .collect();
            let (samples, zeros) = repeats
                .iter()
                .map(|rep| rep[ri][k])
                .fold((0, 0), |(s, z), (_, _, n, zc)| (s + n, z + zc));
            if slopes.is_empty() {
                continue;
            }
            let n = slopes.len() as f64;
            let mean = slopes.iter().sum::<f64>() / n;
            let var = slopes.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            means.push((k, mean));
            bins.push(SlopeBin {
                norm_ratio: ratio,
                u_lo: edges[k],
                u_hi: edges[k + 1],
                repeats: slopes.len(),
                slope_mean: mean,
                slope_var: var,
                zero_change: zeros as f64 / samples.max(1) as f64,
            });
        }
        let peak = means.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|&(k, _)| k);
        peak_at_threshold.push((ratio, peak == Some(threshold_bin)));
    }

    if let Some(mut csv) = sink.csv(
        "apical_slope.csv",
        &["norm_ratio", "u_lo", "u_hi", "repeats", "slope_mean", "slope_var", "zero_change_fraction"],
    )? {
        for b in &bins {
            csv.row([
                fmt_f64(b.norm_ratio),
                fmt_f64(b.u_lo),
                fmt_f64(b.u_hi),
                b.repeats.to_string(),
                fmt_f64(b.slope_mean),
                fmt_f64(b.slope_var),
                fmt_f64(b.zero_change),
            ])?;
        }
        csv.finish()?;
    }
    let report = SlopeReport { bins, peak_at_threshold };
    sink.json("apical_slope.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ApicalSlopeConfig {
        ApicalSlopeConfig {
            repeats: 40,
            norm_ratios: vec![0.0, 0.1],
            ..ApicalSlopeConfig::default()
        }
    }

    #[test]
    fn zero_apical_input_drops_every_bin() {
        let report = run(&small(), 3, &Sink::none()).unwrap();
        assert!(report.bins.iter().all(|b| b.norm_ratio != 0.0));
        assert!(report.bins.iter().any(|b| b.norm_ratio == 0.1));
    }

    #[test]
    fn edges_center_a_bin_on_threshold() {
        let e = bin_edges(&ApicalSlopeConfig::default(), 1.0);
        assert_eq!(e.len(), 19);
        assert!(e.windows(2).any(|w| w[0] == 0.875 && w[1] == 1.125));
    }

    #[test]
    fn repeats_are_independent_of_thread_schedule() {
        let a = run(&small(), 8, &Sink::none()).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| run(&small(), 8, &Sink::none()).unwrap());
        assert_eq!(a.bins, b.bins);
    }
}
