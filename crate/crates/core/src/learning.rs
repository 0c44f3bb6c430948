//! Plasticity rules, accumulation across a mini-batch and the optimizer.
//!
//! Per trial, basal weights change by `Σ_t e_post[t]ᵀ · a_pre[t]` (Hebbian in
//! the error and the presynaptic PSC, signed for inhibitory inputs) and every
//! backward matrix changes by `-Σ_t I_a[t]ᵀ · a_back[t]` (anti-Hebbian in the
//! apical current of its targets). Sums over the trials of a batch are
//! averaged and handed to AdamW as the gradient `g = -mean(Δ)`, then every
//! touched matrix is projected back onto its sign constraint.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::network::{InputDrive, Network, SimOutput};

/// `η · Σ_t e_post[t]ᵀ · a_pre[t]`; both arguments are `T × n`.
pub fn hebbian_basal(pre: ArrayView2<f64>, post_error: ArrayView2<f64>, eta: f64) -> Result<Array2<f64>> {
    if pre.nrows() != post_error.nrows() {
        return Err(Error::DimensionMismatch {
            context: "hebbian_basal",
            expected: format!("{} steps", pre.nrows()),
            actual: format!("{} steps", post_error.nrows()),
        });
    }
    Ok(post_error.t().dot(&pre) * eta)
}

/// `-η · Σ_t I_a[t]ᵀ · a_back[t]`, shaped like the backward matrix
/// (targets × backward cells).
pub fn anti_hebbian_apical(
    back_psc: ArrayView2<f64>,
    apical: ArrayView2<f64>,
    eta: f64,
) -> Result<Array2<f64>> {
    if back_psc.nrows() != apical.nrows() {
        return Err(Error::DimensionMismatch {
            context: "anti_hebbian_apical",
            expected: format!("{} steps", back_psc.nrows()),
            actual: format!("{} steps", apical.nrows()),
        });
    }
    Ok(apical.t().dot(&back_psc) * -eta)
}

/// Per-matrix sums of plasticity over the trials of one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlasticityAccumulator {
    sums: BTreeMap<String, Array2<f64>>,
    trials: usize,
}

impl PlasticityAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, delta: Array2<f64>) -> Result<()> {
        match self.sums.get_mut(name) {
            Some(sum) => {
                check_shape("PlasticityAccumulator::add", sum.dim(), delta.dim())?;
                *sum += &delta;
            }
            None => {
                self.sums.insert(name.to_string(), delta);
            }
        }
        Ok(())
    }

    pub fn add_trials(&mut self, n: usize) {
        self.trials += n;
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.sums.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sums.keys().map(String::as_str)
    }

    pub fn reset(&mut self) {
        self.sums.clear();
        self.trials = 0;
    }

    /// Sums divided by the trial count.
    pub fn mean(&self) -> Result<BTreeMap<String, Array2<f64>>> {
        if self.trials == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = self.trials as f64;
        Ok(self.sums.iter().map(|(k, v)| (k.clone(), v / n)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    #[serde(rename = "adamw")]
    AdamW(AdamWConfig),
    /// `w += lr · mean(Δ)`.
    Sgd { lr: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamW(AdamWConfig::default())
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            OptimizerKind::AdamW(c) => {
                c.lr > 0.0
                    && (0.0..1.0).contains(&c.beta1)
                    && (0.0..1.0).contains(&c.beta2)
                    && c.eps > 0.0
                    && c.weight_decay >= 0.0
            }
            OptimizerKind::Sgd { lr } => *lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer moments keyed by matrix name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: BTreeMap<String, Array2<f64>>,
    pub second: BTreeMap<String, Array2<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update from the batch-mean plasticity `mean_delta`.
    pub fn apply(&mut self, net: &mut Network, mean_delta: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        for (name, delta) in mean_delta {
            let m = net.matrix_mut(name).ok_or_else(|| Error::Matrix {
                name: name.clone(),
                reason: "plasticity for a matrix the network does not have".into(),
            })?;
            check_shape("optimizer update", m.shape(), delta.dim())?;
            match self.kind {
                OptimizerKind::Sgd { lr } => m.update(|w| w.scaled_add(lr, delta))?,
                OptimizerKind::AdamW(c) => {
                    let mo = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Array2::zeros(delta.dim()));
                    let ve = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Array2::zeros(delta.dim()));
                    ndarray::Zip::from(&mut *mo).and(&mut *ve).and(delta).for_each(|m, v, &d| {
                        let g = -d;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    });
                    if mo.iter().chain(ve.iter()).any(|x| !x.is_finite()) {
                        return Err(Error::NumericFault {
                            step: self.step as usize,
                            what: format!("non-finite optimizer moment for {name}"),
                        });
                    }
                    let bc1 = 1.0 - c.beta1.powf(t);
                    let bc2 = 1.0 - c.beta2.powf(t);
                    let (mo, ve) = (&*mo, &*ve);
                    m.update(|w| {
                        ndarray::Zip::from(w).and(mo).and(ve).for_each(|w, &m, &v| {
                            *w -= c.lr * c.weight_decay * *w;
                            *w -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                        });
                    })?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub trials: usize,
    pub mean_loss: f64,
    pub correct: usize,
}

/// Simulates a batch with plasticity and returns the mean updates. Trials
/// are processed in ascending `ids` order so the result does not depend on
/// the order they were given in.
pub fn batch_plasticity(
    net: &Network,
    inputs: ArrayView2<f64>,
    targets: &[usize],
    ids: &[u64],
) -> Result<(BTreeMap<String, Array2<f64>>, SimOutput, Vec<usize>)> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != n || ids.len() != n {
        return Err(Error::DimensionMismatch {
            context: "batch_plasticity",
            expected: format!("{n} targets and ids"),
            actual: format!("{} targets, {} ids", targets.len(), ids.len()),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (ids[i], i));
    let x = inputs.select(Axis(0), &order);
    let y: Vec<usize> = order.iter().map(|&i| targets[i]).collect();
    let mut acc = PlasticityAccumulator::new();
    let out = net.simulate(InputDrive::Constant(x.view()), Some(&y), Some(&mut acc), false)?;
    Ok((acc.mean()?, out, order))
}

/// One optimizer step on a mini-batch.
pub fn apply_batch(
    net: &mut Network,
    opt: &mut OptimizerState,
    inputs: ArrayView2<f64>,
    targets: &[usize],
    ids: &[u64],
) -> Result<BatchStats> {
    let (mean, out, order) = batch_plasticity(net, inputs, targets, ids)?;
    let correct = out
        .predictions()
        .iter()
        .zip(&order)
        .filter(|(p, &i)| **p == targets[i])
        .count();
    opt.apply(net, &mean)?;
    Ok(BatchStats {
        trials: order.len(),
        mean_loss: out.loss.mean().unwrap_or(0.0),
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn hebbian_example() {
        let pre = array![[1.0, 0.0], [0.5, 2.0]];
        let err = array![[0.1], [-0.2]];
        let d = hebbian_basal(pre.view(), err.view(), 1.0).unwrap();
        assert_abs_diff_eq!(d, array![[0.1 - 0.1, -0.4]], epsilon = 1e-15);
        assert!(hebbian_basal(pre.view(), array![[1.0]].view(), 1.0).is_err());
    }

    #[test]
    fn anti_hebbian_example() {
        let back = array![[1.0, 0.0]];
        let apical = array![[0.5, -1.0, 0.0]];
        let d = anti_hebbian_apical(back.view(), apical.view(), 0.1).unwrap();
        assert_abs_diff_eq!(d, array![[-0.05, 0.0], [0.1, 0.0], [0.0, 0.0]], epsilon = 1e-15);
    }

    #[test]
    fn accumulator_means() {
        let mut acc = PlasticityAccumulator::new();
        assert!(matches!(acc.mean(), Err(Error::EmptyBatch)));
        acc.add("a", array![[1.0, 2.0]]).unwrap();
        acc.add("a", array![[3.0, 0.0]]).unwrap();
        acc.add_trials(2);
        assert_eq!(acc.mean().unwrap()["a"], array![[2.0, 1.0]]);
        assert!(acc.add("a", array![[1.0]]).is_err());
        acc.reset();
        assert_eq!(acc.trials(), 0);
    }

    #[test]
    fn first_adamw_step_has_size_lr() {
        let mut net = Network::new(NetworkConfig {
            layer_sizes: vec![2, 3, 2],
            ..NetworkConfig::default()
        })
        .unwrap();
        let before = net.matrix("layer2.w_pyr").unwrap().values().clone();
        let mut delta = BTreeMap::new();
        delta.insert("layer2.w_pyr".to_string(), Array2::from_elem((2, 3), 0.3));
        let mut opt = OptimizerState::new(OptimizerKind::default());
        opt.apply(&mut net, &delta).unwrap();
        let after = net.matrix("layer2.w_pyr").unwrap().values();
        for (a, b) in after.iter().zip(before.iter()) {
            assert_abs_diff_eq!(a - b, 5e-4, epsilon = 1e-10);
        }
    }

    #[test]
    fn updates_respect_dale() {
        let mut net = Network::new(NetworkConfig {
            layer_sizes: vec![2, 3, 2],
            ..NetworkConfig::default()
        })
        .unwrap();
        let mut delta = BTreeMap::new();
        delta.insert("layer2.w_pyr".to_string(), Array2::from_elem((2, 3), -100.0));
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 1.0 });
        opt.apply(&mut net, &delta).unwrap();
        assert!(net.matrix("layer2.w_pyr").unwrap().values().iter().all(|&w| w == 0.0));

        delta.insert("nope".to_string(), Array2::zeros((1, 1)));
        assert!(opt.apply(&mut net, &delta).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        let mut net = Network::new(NetworkConfig {
            layer_sizes: vec![2, 3, 2],
            ..NetworkConfig::default()
        })
        .unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::default());
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            apply_batch(&mut net, &mut opt, x.view(), &[], &[]),
            Err(Error::EmptyBatch)
        ));
    }
}
