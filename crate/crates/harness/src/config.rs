//! TOML run configuration.
//!
//! Every section is optional; missing keys take the defaults below. The
//! top-level `seed` is copied into the network so one number fixes a run.
//!
//! ```toml
//! seed = 1
//! output_dir = "runs/fc1"
//!
//! [network]
//! layer_sizes = [784, 100, 10]
//! inh_variant = "mc2"
//!
//! [train]
//! epochs = 20
//! batch_size = 64
//! optimizer = { kind = "adamw", lr = 5e-4 }
//! ```

use std::path::{Path, PathBuf};

use dalebp_core::{NetworkConfig, OptimizerKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const DATA_DIR_ENV: &str = "DALEBP_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub apical_slope: ApicalSlopeConfig,
    pub anti_hebbian: AntiHebbianConfig,
    pub assembly: AssemblyConfig,
    pub traces: TracesConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            apical_slope: ApicalSlopeConfig::default(),
            anti_hebbian: AntiHebbianConfig::default(),
            assembly: AssemblyConfig::default(),
            traces: TracesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Overridden by `DALEBP_DATA_DIR`.
    pub data_dir: PathBuf,
    /// Use only the first `n` training / test images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub augmentation: Augmentation,
    /// Write a checkpoint every `n` epochs (and always after the last one).
    pub checkpoint_every: usize,
    /// Test images used per epoch to log `δᵀ·W·B·δ`.
    pub fa_probe_trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerKind::default(),
            data_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            augmentation: Augmentation::default(),
            checkpoint_every: 1,
            fa_probe_trials: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub enabled: bool,
    pub crop_padding: usize,
    pub max_rotation_deg: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: false,
            crop_padding: 2,
            max_rotation_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApicalSlopeConfig {
    pub repeats: usize,
    pub steps: usize,
    /// `||I_a|| / ||I_b||` values.
    pub norm_ratios: Vec<f64>,
    pub n_basal: usize,
    pub n_apical: usize,
    pub p_fire: f64,
    /// Basal weights are `U(0, basal_weight_max)`.
    pub basal_weight_max: f64,
    pub basal_bias: f64,
    pub bin_width: f64,
    /// Bins span `ϑ + bin_width·(k - 0.5)` for `k` in this range.
    pub bin_min: i32,
    pub bin_max: i32,
    /// Bins with fewer samples in a repeat are skipped for that repeat.
    pub min_points: usize,
}

impl Default for ApicalSlopeConfig {
    fn default() -> Self {
        Self {
            repeats: 1000,
            steps: 100,
            norm_ratios: vec![0.05, 0.1, 0.2, 0.5],
            n_basal: 50,
            n_apical: 50,
            p_fire: 0.1,
            basal_weight_max: 0.6,
            basal_bias: 0.3,
            bin_width: 0.25,
            bin_min: -14,
            bin_max: 4,
            min_points: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AntiHebbianConfig {
    pub pairs: usize,
    pub p_fire: f64,
    pub eta: f64,
    pub steps: usize,
    pub repeats: usize,
    pub noise_stds: Vec<f64>,
    /// Rows of the per-step CSV are written every `log_every` steps.
    pub log_every: usize,
}

impl Default for AntiHebbianConfig {
    fn default() -> Self {
        Self {
            pairs: 50,
            p_fire: 0.02,
            eta: 0.03,
            steps: 20_000,
            repeats: 50,
            noise_stds: vec![0.0, 0.01, 0.1, 1.0],
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssemblyConfig {
    pub size: usize,
    pub runs: usize,
    pub steps: usize,
    pub eta: f64,
    pub w_max: f64,
    pub p_fire: f64,
    pub som_threshold: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub snapshot_every: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            size: 50,
            runs: 20,
            steps: 5000,
            eta: 0.1,
            w_max: 1.0,
            p_fire: 0.02,
            som_threshold: 1.0,
            sinkhorn_iters: 50,
            sinkhorn_tol: 1e-6,
            snapshot_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TracesConfig {
    /// Directory holding the checked-in golden CSVs.
    pub golden_dir: PathBuf,
    /// Seed of the waveform stimuli; the golden files were made with the default.
    pub stimulus_seed: u64,
    /// Random spike patterns per circuit property check.
    pub property_patterns: usize,
    /// Repeats of the MC2 injected-error run.
    pub mc2_repeats: usize,
    pub mc2_amplitude: f64,
}

impl Default for TracesConfig {
    fn default() -> Self {
        Self {
            golden_dir: PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/golden")),
            stimulus_seed: 6,
            property_patterns: 1000,
            mc2_repeats: 100,
            mc2_amplitude: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.network.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.optimizer.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.checkpoint_every == 0 {
            return Err(HarnessError::Config("batch_size and checkpoint_every must be positive".into()));
        }
        let s = &self.apical_slope;
        if s.bin_width <= 0.0 || s.bin_min >= s.bin_max || s.norm_ratios.iter().any(|&r| r < 0.0) {
            return Err(HarnessError::Config("apical_slope bins or ratios are invalid".into()));
        }
        let a = &self.anti_hebbian;
        if a.log_every == 0 || a.noise_stds.iter().any(|&s| s < 0.0) {
            return Err(HarnessError::Config("anti_hebbian log_every must be positive, noise stds non-negative".into()));
        }
        if self.assembly.snapshot_every == 0 {
            return Err(HarnessError::Config("assembly snapshot_every must be positive".into()));
        }
        Ok(())
    }

    /// Dataset directory: `DALEBP_DATA_DIR` if set, else `train.data_dir`.
    pub fn data_dir(&self) -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.train.data_dir.clone())
    }

    /// Short hash of the normalized configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dalebp_core::InhVariant;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn parses_sections_and_propagates_seed() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 9
            [network]
            layer_sizes = [784, 100, 100, 10]
            inh_variant = "mc3"
            [train]
            epochs = 3
            optimizer = { kind = "sgd", lr = 0.01 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.network.seed, 9);
        assert_eq!(cfg.network.inh_variant, InhVariant::Mc3);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd { lr: 0.01 });
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("sed = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbatch_size = 0").is_err());
        assert!(ExperimentConfig::from_toml("[network]\ntimesteps = 0").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml("seed = 1").unwrap();
        let b = ExperimentConfig::from_toml("seed = 1\n# comment").unwrap();
        let c = ExperimentConfig::from_toml("seed = 2").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
