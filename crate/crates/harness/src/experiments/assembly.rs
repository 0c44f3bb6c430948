//! Assembly competition: Pyr→SOM weights start random and should settle
//! into a one-to-one pairing.

use dalebp_core::dale::doubly_normalize;
use dalebp_core::microcircuits::{
    assembly_competition_update, assembly_som_response, bernoulli_spikes, permutation_of, AssemblyCompetitionConfig,
};
use dalebp_core::rng::{substream, Stream};
use dalebp_core::{DaleMatrix, PreSign};
use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::AssemblyConfig;
use crate::error::Result;
use crate::experiments::Sink;
use crate::output::fmt_f64;

#[derive(Debug, Clone, Serialize)]
pub struct AssemblyRun {
    pub run: usize,
    pub permutation: Option<Vec<usize>>,
    /// Largest deviation of any row or column sum from `w_max`, over all steps.
    pub max_sum_deviation: f64,
    #[serde(skip)]
    pub snapshots: Vec<(usize, Array2<f64>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssemblyReport {
    pub runs: Vec<AssemblyRun>,
    pub permutation_fraction: f64,
    pub max_sum_deviation: f64,
}

fn core_config(cfg: &AssemblyConfig) -> AssemblyCompetitionConfig {
    AssemblyCompetitionConfig {
        w_max: cfg.w_max,
        p_fire: cfg.p_fire,
        som_threshold: cfg.som_threshold,
        sinkhorn_iters: cfg.sinkhorn_iters,
        sinkhorn_tol: cfg.sinkhorn_tol,
        ..AssemblyCompetitionConfig::with_eta(cfg.eta)
    }
}

fn sum_deviation(w: &Array2<f64>, target: f64) -> f64 {
    w.sum_axis(Axis(0))
        .iter()
        .chain(w.sum_axis(Axis(1)).iter())
        .map(|s| (s - target).abs())
        .fold(0.0, f64::max)
}

pub fn one_run(cfg: &AssemblyConfig, seed: u64, run: usize) -> Result<AssemblyRun> {
    let core = core_config(cfg);
    core.validate()?;
    let n = cfg.size;
    let mut init = substream(seed, Stream::Init, run as u64);
    let raw = Array2::from_shape_fn((n, n), |_| init.random_range(0.0..cfg.w_max));
    let mut w = doubly_normalize(
        &DaleMatrix::new("w_pys", PreSign::Excitatory, raw)?,
        cfg.w_max,
        cfg.sinkhorn_iters,
        cfg.sinkhorn_tol,
    )?;
    let mut stim = substream(seed, Stream::Stimulation, run as u64);
    let mut dev = sum_deviation(w.values(), cfg.w_max);
    let mut snapshots = vec![(0, w.values().clone())];
    for t in 1..=cfg.steps {
        let pyr = bernoulli_spikes(&mut stim, n, cfg.p_fire);
        let som = assembly_som_response(&w, &pyr, cfg.som_threshold)?;
        w = assembly_competition_update(&w, &pyr, &som, &core)?;
        dev = dev.max(sum_deviation(w.values(), cfg.w_max));
        if t % cfg.snapshot_every == 0 || t == cfg.steps {
            snapshots.push((t, w.values().clone()));
        }
    }
    Ok(AssemblyRun {
        run,
        permutation: permutation_of(&w, cfg.w_max),
        max_sum_deviation: dev,
        snapshots,
    })
}

pub fn run(cfg: &AssemblyConfig, seed: u64, sink: &Sink) -> Result<AssemblyReport> {
    let runs: Vec<AssemblyRun> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| one_run(cfg, seed, r))
        .collect::<Result<_>>()?;
    let ok = runs.iter().filter(|r| r.permutation.is_some()).count();
    let report = AssemblyReport {
        permutation_fraction: ok as f64 / runs.len().max(1) as f64,
        max_sum_deviation: runs.iter().map(|r| r.max_sum_deviation).fold(0.0, f64::max),
        runs,
    };

    if let Some(mut csv) = sink.csv("assembly.csv", &["run", "is_permutation", "max_sum_deviation"])? {
        for r in &report.runs {
            csv.row([r.run.to_string(), r.permutation.is_some().to_string(), fmt_f64(r.max_sum_deviation)])?;
        }
        csv.finish()?;
    }
    if let Some(mut csv) = sink.csv("assembly_snapshots.csv", &["run", "step", "som", "pyr", "weight"])? {
        for r in &report.runs {
            for (step, w) in &r.snapshots {
                for ((i, j), x) in w.indexed_iter() {
                    csv.row([r.run.to_string(), step.to_string(), i.to_string(), j.to_string(), fmt_f64(*x)])?;
                }
            }
        }
        csv.finish()?;
    }
    sink.json("assembly.json", &report)?;
    Ok(report)
}
