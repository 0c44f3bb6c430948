//! Alignment angle between `B` and `Wᵀ` per layer over a training run.

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiments::Sink;
use crate::output::fmt_f64;
use crate::train::{train_from_config, EpochRecord};

#[derive(Debug, Clone, Serialize)]
pub struct AngleReport {
    /// `(epoch, layer index, degrees)`.
    pub angles: Vec<(usize, usize, f64)>,
    pub max_angle: f64,
    pub initial: Vec<f64>,
}

pub fn from_records(records: &[EpochRecord]) -> AngleReport {
    let angles: Vec<(usize, usize, f64)> = records
        .iter()
        .flat_map(|r| r.angles.iter().map(move |&(l, a)| (r.epoch, l, a)))
        .collect();
    AngleReport {
        max_angle: angles.iter().map(|a| a.2).fold(f64::NEG_INFINITY, f64::max),
        initial: angles.iter().filter(|a| a.0 == 0).map(|a| a.2).collect(),
        angles,
    }
}

pub fn run(cfg: &ExperimentConfig, sink: &Sink) -> Result<AngleReport> {
    let train = train_from_config(cfg, sink.dir())?;
    let report = from_records(&train.epochs);
    if let Some(mut csv) = sink.csv("angle.csv", &["epoch", "layer", "angle_deg"])? {
        for (e, l, a) in &report.angles {
            csv.row([e.to_string(), (l + 1).to_string(), fmt_f64(*a)])?;
        }
        csv.finish()?;
    }
    sink.json("angle.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collects_initial_and_maximum() {
        let rec = |epoch, angles: Vec<(usize, f64)>| EpochRecord {
            epoch,
            train_loss: 0.0,
            train_acc: 0.0,
            test_acc: 0.0,
            angles,
            fa_mean: 0.0,
            fa_positive: 0.0,
            dale_violations: 0,
        };
        let r = from_records(&[rec(0, vec![(1, 44.0), (2, 46.0)]), rec(1, vec![(1, 50.0), (2, 30.0)])]);
        assert_eq!(r.initial, [44.0, 46.0]);
        assert_eq!(r.max_angle, 50.0);
        assert_eq!(r.angles.len(), 4);
    }
}
