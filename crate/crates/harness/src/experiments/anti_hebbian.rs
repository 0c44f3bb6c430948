//! Anti-Hebbian alignment of `W_←Pyr` and `W_←SOM`.
//!
//! 50 Pyr/SOM pairs fire identical Bernoulli trains with opposite sign onto
//! 50 apical dendrites. Gaussian noise on the Pyr trace stands in for the
//! error signal. The rule drives the two weight matrices together, and the
//! residual `||W_←Pyr - W_←SOM||_F` should shrink unless the noise dominates.

use dalebp_core::learning::anti_hebbian_apical;
use dalebp_core::microcircuits::bernoulli_spikes;
use dalebp_core::rng::{substream, Stream};
use dalebp_core::{DaleMatrix, InitVariant, PreSign};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::AntiHebbianConfig;
use crate::error::Result;
use crate::experiments::Sink;
use crate::output::fmt_f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseLevel {
    pub noise_std: f64,
    /// Final residual relative to its initial value, mean and std over repeats.
    pub final_mean: f64,
    pub final_std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AntiHebbianReport {
    pub levels: Vec<NoiseLevel>,
    pub monotone_in_noise: bool,
}

/// Relative residual `||W_←Pyr - W_←SOM||_F / initial`, sampled every
/// `log_every` steps and at the end.
pub fn one_run(cfg: &AntiHebbianConfig, std: f64, seed: u64, repeat: usize) -> Result<Vec<f64>> {
    let n = cfg.pairs;
    let mut init = substream(seed, Stream::Init, repeat as u64);
    let mut w_pyr = DaleMatrix::init_kaiming("w_back_pyr", (n, n), InitVariant::Uniform, PreSign::Excitatory, &mut init)?;
    let mut w_som = DaleMatrix::init_kaiming("w_back_som", (n, n), InitVariant::Uniform, PreSign::Inhibitory, &mut init)?;
    let gap = |p: &DaleMatrix, s: &DaleMatrix| {
        let d = p.values() - s.values();
        d.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let g0 = gap(&w_pyr, &w_som);

    let mut stim = substream(seed, Stream::Stimulation, repeat as u64);
    let mut noise_rng = substream(seed, Stream::Noise, repeat as u64);
    let noise = (std > 0.0).then(|| Normal::new(0.0, std).expect("std is finite"));
    let mut out = vec![1.0];
    for t in 1..=cfg.steps {
        let s = bernoulli_spikes(&mut stim, n, cfg.p_fire);
        let mut a_plus: Array2<f64> = s.as_matrix().clone();
        if let Some(noise) = &noise {
            a_plus.mapv_inplace(|x| x + noise.sample(&mut noise_rng));
        }
        let a_minus = s.as_matrix().mapv(|x| -x);
        let apical = w_pyr.apply(a_plus.view())? + w_som.apply(a_minus.view())?;
        let d_pyr = anti_hebbian_apical(a_plus.view(), apical.view(), cfg.eta)?;
        let d_som = anti_hebbian_apical(a_minus.view(), apical.view(), cfg.eta)?;
        w_pyr.update(|w| *w += &d_pyr)?;
        w_som.update(|w| *w += &d_som)?;
        if t % cfg.log_every == 0 || t == cfg.steps {
            out.push(gap(&w_pyr, &w_som) / g0);
        }
    }
    Ok(out)
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let v = Array1::from(x.to_vec());
    (v.mean().unwrap_or(f64::NAN), v.std(0.0))
}

pub fn run(cfg: &AntiHebbianConfig, seed: u64, sink: &Sink) -> Result<AntiHebbianReport> {
    let mut csv = sink.csv("anti_hebbian.csv", &["noise_std", "step", "residual_mean", "residual_std"])?;
    let mut levels = Vec::new();
    for &std in &cfg.noise_stds {
        let runs: Vec<Vec<f64>> = (0..cfg.repeats)
            .into_par_iter()
            .map(|r| one_run(cfg, std, seed, r))
            .collect::<Result<_>>()?;
        let samples = runs.first().map_or(0, Vec::len);
        for k in 0..samples {
            let col: Vec<f64> = runs.iter().map(|r| r[k]).collect();
            let (m, s) = mean_std(&col);
            let step = if k + 1 == samples { cfg.steps } else { k * cfg.log_every };
            if let Some(csv) = csv.as_mut() {
                csv.row([fmt_f64(std), step.to_string(), fmt_f64(m), fmt_f64(s)])?;
            }
        }
        let finals: Vec<f64> = runs.iter().filter_map(|r| r.last().copied()).collect();
        let (final_mean, final_std) = mean_std(&finals);
        levels.push(NoiseLevel {
            noise_std: std,
            final_mean,
            final_std,
        });
    }
    if let Some(csv) = csv {
        csv.finish()?;
    }
    let mut sorted = levels.clone();
    sorted.sort_by(|a, b| a.noise_std.total_cmp(&b.noise_std));
    let monotone_in_noise = sorted.windows(2).all(|w| w[1].final_mean >= w[0].final_mean);
    let report = AntiHebbianReport {
        levels,
        monotone_in_noise,
    };
    sink.json("anti_hebbian.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AntiHebbianConfig {
        AntiHebbianConfig {
            steps: 3000,
            repeats: 4,
            noise_stds: vec![0.0],
            ..AntiHebbianConfig::default()
        }
    }

    #[test]
    fn noiseless_gap_shrinks() {
        let r = one_run(&small(), 0.0, 1, 0).unwrap();
        assert_eq!(r[0], 1.0);
        assert!(*r.last().unwrap() < 0.5, "{:?}", r.last());
    }

    #[test]
    fn no_spikes_means_no_learning() {
        let cfg = AntiHebbianConfig {
            p_fire: 0.0,
            ..small()
        };
        let r = one_run(&cfg, 0.0, 1, 0).unwrap();
        assert!(r.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn log_cadence() {
        let cfg = AntiHebbianConfig {
            steps: 250,
            log_every: 100,
            ..small()
        };
        assert_eq!(one_run(&cfg, 0.1, 2, 0).unwrap().len(), 4);
    }
}
