//! Mini-batch training on MNIST with per-epoch evaluation.

use std::path::{Path, PathBuf};

use dalebp_core::checkpoint::Checkpoint;
use dalebp_core::network::InputDrive;
use dalebp_core::rng::{substream, Stream};
use dalebp_core::learning::apply_batch;
use dalebp_core::{Network, OptimizerState};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{augment, Dataset};
use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, write_json, CsvOut};

const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 0 is the untrained network.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// `(layer index, degrees)` for each layer with a backward projection.
    pub angles: Vec<(usize, f64)>,
    /// Mean of `δᵀ·W·B·δ` over probe trials and layers.
    pub fa_mean: f64,
    pub fa_positive: f64,
    pub dale_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
}

/// Accuracy of `net` on `data`, evaluated in parallel chunks.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let chunks: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let correct: Vec<usize> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + EVAL_CHUNK).min(data.len());
            let pred = net.predict(data.images.slice(s![start..end, ..]))?;
            Ok(pred.iter().zip(&data.labels[start..end]).filter(|(p, y)| p == y).count())
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Time-summed error of each layer on the first `n` test images, then
/// `δᵀ·W·B·δ` per layer with a backward projection.
fn fa_probe(net: &Network, data: &Dataset, n: usize) -> Result<(f64, f64)> {
    let n = n.min(data.len());
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let out = net.simulate(
        InputDrive::Constant(data.images.slice(s![..n, ..])),
        Some(&data.labels[..n]),
        None,
        true,
    )?;
    let trace = out.trace.expect("trace requested");
    let mut values = Vec::new();
    for l in 1..net.layers().len() {
        if net.forward_backward_pair(l).is_none() {
            continue;
        }
        let steps = &trace.layers[l].error;
        let mut total: Array2<f64> = Array2::zeros(steps[0].dim());
        for e in steps {
            total += e;
        }
        for row in total.axis_iter(Axis(0)) {
            values.push(net.fa_quadratic(l, row)?);
        }
    }
    if values.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let positive = values.iter().filter(|&&v| v > 0.0).count() as f64 / values.len() as f64;
    Ok((mean, positive))
}

fn dale_violations(net: &Network) -> usize {
    net.matrices().iter().filter(|m| m.check_dale().is_err()).count()
}

fn evaluate(
    net: &Network,
    test: &Dataset,
    epoch: usize,
    train: (f64, f64),
    violations: usize,
    fa_trials: usize,
) -> Result<EpochRecord> {
    let (fa_mean, fa_positive) = fa_probe(net, test, fa_trials)?;
    Ok(EpochRecord {
        epoch,
        train_loss: train.0,
        train_acc: train.1,
        test_acc: accuracy(net, test)?,
        angles: net.alignment_angles()?,
        fa_mean,
        fa_positive,
        dale_violations: violations,
    })
}

pub struct Trainer<'a> {
    pub cfg: &'a ExperimentConfig,
    pub net: Network,
    pub opt: OptimizerState,
    /// Where epochs.csv, summary.json and checkpoints go; `None` writes nothing.
    pub out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        Ok(Self {
            cfg,
            net: Network::new(cfg.network.clone())?,
            opt: OptimizerState::new(cfg.train.optimizer.clone()),
            out_dir,
        })
    }

    fn checkpoint(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let text = toml::to_string(self.cfg).expect("config serializes");
            let path = dir.join(name);
            Checkpoint::capture(text, self.cfg.seed, &self.net, Some(&self.opt))
                .save(&path)
                .map_err(HarnessError::from)?;
        }
        Ok(())
    }

    /// One pass over `train` in the epoch's shuffled order.
    /// Returns `(mean loss, accuracy, Dale violations)`.
    pub fn epoch(&mut self, epoch: usize, train: &Dataset) -> Result<(f64, f64, usize)> {
        let tc = &self.cfg.train;
        let seed = self.cfg.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(seed, Stream::DataOrder, epoch as u64));
        let mut aug_rng = substream(seed, Stream::Augmentation, epoch as u64);

        let (mut loss, mut correct, mut seen, mut violations) = (0.0, 0usize, 0usize, 0usize);
        for idx in order.chunks(tc.batch_size) {
            let mut x = train.images.select(Axis(0), idx);
            if tc.augmentation.enabled {
                for (k, &i) in idx.iter().enumerate() {
                    augment(train.images.row(i), x.row_mut(k), &tc.augmentation, &mut aug_rng);
                }
            }
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let stats = match apply_batch(&mut self.net, &mut self.opt, x.view(), &y, &ids) {
                Ok(s) => s,
                Err(e @ dalebp_core::Error::NumericFault { .. }) => {
                    // The fault is raised before the weights change.
                    self.checkpoint("last_good.ckpt")?;
                    return Err(e.into());
                }
                Err(e) => return Err(e.into()),
            };
            violations += dale_violations(&self.net);
            loss += stats.mean_loss * stats.trials as f64;
            correct += stats.correct;
            seen += stats.trials;
        }
        let seen = seen.max(1) as f64;
        Ok((loss / seen, correct as f64 / seen, violations))
    }

    /// Trains for `train.epochs` epochs, logging and checkpointing as
    /// configured.
    pub fn run(&mut self, train: &Dataset, test: &Dataset) -> Result<TrainReport> {
        let cfg = self.cfg;
        let hash = cfg.hash();
        let n_angles = self.net.alignment_angles()?.len();
        let mut header = vec!["epoch".to_string(), "train_loss".into(), "train_acc".into(), "test_acc".into()];
        for (l, _) in self.net.alignment_angles()? {
            header.push(format!("angle_layer{}", l + 1));
        }
        header.extend(["fa_mean".into(), "fa_positive".into(), "dale_violations".into()]);
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut csv = match &self.out_dir {
            Some(dir) => Some(CsvOut::create(&dir.join("epochs.csv"), &hash, &header_refs)?),
            None => None,
        };

        let mut records = Vec::new();
        let init_violations = dale_violations(&self.net);
        let first = evaluate(&self.net, test, 0, (f64::NAN, f64::NAN), init_violations, cfg.train.fa_probe_trials)?;
        records.push(first);
        for epoch in 1..=cfg.train.epochs {
            let (loss, acc, violations) = self.epoch(epoch, train)?;
            let rec = evaluate(&self.net, test, epoch, (loss, acc), violations, cfg.train.fa_probe_trials)?;
            log::info!(
                "epoch {epoch}: loss {loss:.4} train {:.2}% test {:.2}% angles {:?}",
                100.0 * acc,
                100.0 * rec.test_acc,
                rec.angles.iter().map(|(_, a)| format!("{a:.1}")).collect::<Vec<_>>()
            );
            records.push(rec);
            if epoch % cfg.train.checkpoint_every == 0 || epoch == cfg.train.epochs {
                self.checkpoint(&format!("epoch{epoch:03}.ckpt"))?;
            }
        }

        if let Some(csv) = csv.as_mut() {
            for r in &records {
                let mut row = vec![r.epoch.to_string(), fmt_f64(r.train_loss), fmt_f64(r.train_acc), fmt_f64(r.test_acc)];
                debug_assert_eq!(r.angles.len(), n_angles);
                row.extend(r.angles.iter().map(|(_, a)| fmt_f64(*a)));
                row.extend([fmt_f64(r.fa_mean), fmt_f64(r.fa_positive), r.dale_violations.to_string()]);
                csv.row(&row)?;
            }
        }
        if let Some(csv) = csv {
            csv.finish()?;
        }
        let final_test_acc = records.last().map(|r| r.test_acc).unwrap_or(0.0);
        let best_test_acc = records.iter().map(|r| r.test_acc).fold(0.0, f64::max);
        let report = TrainReport {
            config_hash: hash,
            epochs: records,
            final_test_acc,
            best_test_acc,
        };
        if let Some(dir) = &self.out_dir {
            write_json(&dir.join("summary.json"), &report)?;
        }
        Ok(report)
    }
}

/// Loads data per `cfg`, applies the size limits and trains.
pub fn train_from_config(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    let (mut train, mut test) = crate::data::load_mnist(&cfg.data_dir())?;
    if let Some(n) = cfg.train.train_limit {
        train.truncate(n);
    }
    if let Some(n) = cfg.train.test_limit {
        test.truncate(n);
    }
    let mut trainer = Trainer::new(cfg, out_dir.map(Path::to_path_buf))?;
    trainer.run(&train, &test)
}
