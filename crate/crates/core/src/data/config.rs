use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hebbian::UpdateMode;

use super::synth::{SyntheticSceneConfig, TrajectoryKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Fixed Gaussian projection, not trained.
    RandomProjection,
    /// Trainable ReLU MLP.
    #[default]
    Mlp,
}

/// Flat key/value run configuration. Every key is optional in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // model
    pub input_dim: usize,
    pub feature_dim: usize,
    pub bins: usize,
    pub bin_features: usize,
    pub heads: usize,
    pub grids: usize,
    pub encoder: EncoderKind,
    pub encoder_hidden: Vec<usize>,
    pub dropout: f64,
    pub memory_mode: UpdateMode,
    pub eta0: f64,
    pub use_hebbian: bool,
    pub use_grid: bool,
    pub alpha0: f64,
    pub beta0: f64,
    pub gamma0: f64,

    // optimisation
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    /// Store the Hebbian memory matrix in checkpoints.
    pub save_memory: bool,

    // synthetic scene
    pub trajectory: TrajectoryKind,
    pub samples: usize,
    pub noise: f64,
    pub bandwidth: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub segment_len: usize,
    pub holdout_every: usize,
    pub scene_seed: Option<u64>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            input_dim: 64,
            feature_dim: 2048,
            bins: 8,
            bin_features: 256,
            heads: 2,
            grids: 40,
            encoder: EncoderKind::Mlp,
            encoder_hidden: vec![256],
            dropout: 0.5,
            memory_mode: UpdateMode::Incremental,
            eta0: 0.5,
            use_hebbian: true,
            use_grid: true,
            alpha0: 0.0,
            beta0: -3.0,
            gamma0: 0.0,
            lr: 3e-5,
            batch: 128,
            epochs: 1200,
            steps: None,
            weight_decay: 5e-3,
            seed: 0,
            save_memory: true,
            trajectory: TrajectoryKind::Loop,
            samples: 500,
            noise: 0.01,
            bandwidth: 1.0,
            bbox_min: [-2.0, -2.0, 0.0],
            bbox_max: [2.0, 2.0, 1.5],
            segment_len: 10,
            holdout_every: 5,
            scene_seed: None,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bins * self.bin_features != self.feature_dim {
            return fail(format!(
                "bins ({}) x bin_features ({}) must equal feature_dim ({})",
                self.bins, self.bin_features, self.feature_dim
            ));
        }
        if self.heads == 0 || !self.bin_features.is_multiple_of(self.heads) {
            return fail(format!(
                "heads ({}) must divide bin_features ({})",
                self.heads, self.bin_features
            ));
        }
        if self.input_dim == 0 || self.feature_dim < 2 {
            return fail("input_dim must be positive and feature_dim at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.eta0 > 0.0 && self.eta0 < 1.0) {
            return fail(format!("eta0 must lie in (0, 1), got {}", self.eta0));
        }
        if self.batch == 0 || self.grids == 0 || self.samples == 0 {
            return fail("batch, grids and samples must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.noise >= 0.0) {
            return fail("lr, weight_decay and noise must be non-negative".into());
        }
        if self.segment_len == 0 || self.holdout_every < 2 {
            return fail("segment_len must be positive and holdout_every at least 2".into());
        }
        if (0..3).any(|i| !(self.bbox_min[i] < self.bbox_max[i])) {
            return fail("bbox_min must be below bbox_max on every axis".into());
        }
        Ok(())
    }

    pub fn scene(&self) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            trajectory: self.trajectory,
            samples: self.samples,
            bbox_min: self.bbox_min,
            bbox_max: self.bbox_max,
            feature_dim: self.input_dim,
            noise: self.noise,
            bandwidth: self.bandwidth,
            segment_len: self.segment_len,
            holdout_every: self.holdout_every,
            seed: self.scene_seed.unwrap_or(self.seed),
        }
    }

    /// Number of direction tokens per feature row.
    pub fn tokens(&self) -> usize {
        self.bins
    }

    pub fn head_dim(&self) -> usize {
        self.bin_features / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = Config::default();
        assert_eq!(c.feature_dim, 2048);
        assert_eq!((c.bins, c.bin_features, c.heads), (8, 256, 2));
        assert_eq!(c.grids, 40);
        assert_eq!(c.lr, 3e-5);
        assert_eq!((c.batch, c.epochs), (128, 1200));
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.weight_decay, 5e-3);
        assert_eq!((c.alpha0, c.beta0, c.gamma0), (0.0, -3.0, 0.0));
        assert_eq!(c.head_dim(), 128);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c = Config::from_toml_str("feature_dim = 256\nbin_features = 32\nlr = 3e-4\nsteps = 2000\n").unwrap();
        assert_eq!(c.feature_dim, 256);
        assert_eq!(c.steps, Some(2000));
        assert_eq!(c.bins, 8);
    }

    #[test]
    fn roundtrips_through_text() {
        let c = Config {
            encoder: EncoderKind::RandomProjection,
            memory_mode: UpdateMode::Literal,
            ..Config::default()
        };
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_inconsistent_shapes_and_unknown_keys() {
        assert!(Config::from_toml_str("feature_dim = 100").is_err());
        assert!(Config::from_toml_str("heads = 3").is_err());
        assert!(Config::from_toml_str("colour_jitter = 0.7").is_err());
    }
}
