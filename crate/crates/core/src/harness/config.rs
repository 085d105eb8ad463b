use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::MNIST_MEAN_STD;
use crate::losses::{LossConfig, LossKind};
use crate::strategies::{StrategyKind, StrategyParams, TrainConfig, VaeConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Always the first base class.
    Fixed,
    /// Cycles through the previously seen classes in arrival order.
    #[default]
    Rotate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Two-column `raw new` label table.
    pub label_remap: Option<PathBuf>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Items kept per class before splitting (0 = all).
    pub max_per_class: usize,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    /// Zero padding for random crops of the training images (0 = off).
    pub augment_pad: usize,
    pub flip_probability: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "mnist".into(),
            images: PathBuf::new(),
            labels: PathBuf::new(),
            label_remap: None,
            mean: vec![MNIST_MEAN_STD.0],
            std: vec![MNIST_MEAN_STD.1],
            max_per_class: 0,
            test_fraction: 0.2,
            validation_fraction: 0.2,
            augment_pad: 0,
            flip_probability: 0.0,
        }
    }
}

/// Offline ideals supplied instead of trained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdealValues {
    pub base: f64,
    pub all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategyKind>,
    pub pairing: Pairing,
    /// Incremental sessions to run (0 = every remaining class).
    pub sessions: usize,
    pub dataset: DatasetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub strategy: StrategyParams,
    pub ideal: Option<IdealValues>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            strategies: StrategyKind::ALL.to_vec(),
            pairing: Pairing::Rotate,
            sessions: 0,
            dataset: DatasetConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            strategy: StrategyParams::default(),
            ideal: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, dir)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.images);
        fix(&mut self.dataset.labels);
        if let Some(p) = self.dataset.label_remap.as_mut() {
            fix(p);
        }
    }

    /// MNIST desk preset: 5 base classes, 3 sessions, contrastive loss,
    /// short training so a full run fits on one CPU core.
    pub fn desk_mnist(data_dir: &Path, output_dir: &Path) -> Self {
        Self {
            output_dir: output_dir.to_path_buf(),
            seeds: vec![1],
            strategies: vec![StrategyKind::Normal, StrategyKind::Icarl, StrategyKind::Vae],
            sessions: 3,
            dataset: DatasetConfig {
                images: data_dir.join("images-idx3-ubyte.gz"),
                labels: data_dir.join("labels-idx1-ubyte.gz"),
                max_per_class: 1000,
                ..DatasetConfig::default()
            },
            loss: LossConfig::with_kind(LossKind::Contrastive),
            train: TrainConfig {
                max_epochs: 12,
                patience: 3,
                ..TrainConfig::default()
            },
            strategy: StrategyParams {
                vae: VaeConfig {
                    max_epochs: 30,
                    ..VaeConfig::default()
                },
                ..StrategyParams::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required".into());
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return bad("strategies are listed more than once".into());
        }
        let d = &self.dataset;
        if d.name.is_empty() || d.name.contains(',') {
            return bad(format!("dataset name `{}` must be non-empty and comma free", d.name));
        }
        for p in [Some(&d.images), Some(&d.labels), d.label_remap.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return bad(format!("file {} does not exist", p.display()));
            }
        }
        if d.mean.is_empty() || d.mean.len() != d.std.len() {
            return bad("mean and std need one entry per channel".into());
        }
        if d.std.iter().any(|&s| !(s > 0.0)) {
            return bad("std entries must be positive".into());
        }
        for (name, f) in [
            ("test_fraction", d.test_fraction),
            ("validation_fraction", d.validation_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} must lie strictly between 0 and 1, got {f}"));
            }
        }
        if !(0.0..=1.0).contains(&d.flip_probability) {
            return bad(format!(
                "flip_probability must lie in [0, 1], got {}",
                d.flip_probability
            ));
        }
        if let Some(i) = self.ideal {
            if !(i.base > 0.0 && i.base <= 1.0 && i.all > 0.0 && i.all <= 1.0) {
                return bad(format!(
                    "supplied ideals must lie in (0, 1], got {} and {}",
                    i.base, i.all
                ));
            }
        }
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.strategy
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }
}
