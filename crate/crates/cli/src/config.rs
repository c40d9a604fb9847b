//! Experiment configuration: one declarative TOML file, layered over a
//! named profile, with a few command-line overrides.

use std::path::{Path, PathBuf};

use ggt_core::detector::{CalibrationMode, SprtParams};
use ggt_core::forge::DatasetConfig;
use ggt_core::graph::MAX_NODES;
use ggt_core::net::{ModelSpec, Shape, TrainHyper};
use ggt_core::regulate::{aspl_lower_bound, AsplTarget, BatchOptions};
use ggt_core::rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Minutes on a laptop: 4 classes, 16 pruned models.
    Smoke,
    /// The full bin sweep with 100 graphs per bin.
    PaperScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub graphs: GraphSection,
    pub training: TrainingSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: usize,
    pub per_class: usize,
    pub shape: Shape,
    pub contrast: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub conv_channels: usize,
    pub hidden_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub nodes: usize,
    pub degree: usize,
    /// Half-open ASPL intervals `[lower, upper)`, ascending.
    pub bins: Vec<[f64; 2]>,
    pub per_bin: usize,
    pub max_swaps: u64,
    pub restart_factor: usize,
    pub max_tries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    /// Retraining epochs for each pruned model.
    pub pruned_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Pruned models need at least this fraction of the original's
    /// validation accuracy.
    pub accept_ratio: f64,
    /// Graphs taken from the ensemble bin.
    pub ensemble_size: usize,
    pub min_ensemble: usize,
    /// Pruned models start from the original's weights.
    pub warm_start: bool,
    /// Index into `graphs.bins`; defaults to the lowest bin that filled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    /// Confidence cut for the high-confidence FGSM row.
    pub high_confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationKind {
    Youden,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_fraction: f64,
    pub max_models: usize,
    pub calibration: CalibrationKind,
    /// Used when `calibration = "quantile"`.
    pub quantile: f64,
}

/// Named seed streams.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const GRAPHS: u64 = 4;
    pub const ENSEMBLE: u64 = 5;
    pub const ORDER: u64 = 6;
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Smoke => Self {
                seed: 7,
                out: PathBuf::from("runs/smoke"),
                dataset: DatasetSection {
                    classes: 4,
                    per_class: 300,
                    shape: [1, 8, 8],
                    contrast: 0.2,
                    noise: 0.05,
                },
                model: ModelSection {
                    conv_channels: 64,
                    hidden_units: 64,
                },
                graphs: GraphSection {
                    nodes: 64,
                    degree: 3,
                    bins: vec![[3.0, 5.0], [5.0, 7.0]],
                    per_bin: 20,
                    max_swaps: 10_000,
                    restart_factor: 50,
                    max_tries: 1_000_000,
                },
                training: TrainingSection {
                    epochs: 100,
                    pruned_epochs: 60,
                    learning_rate: 0.05,
                    batch_size: 32,
                    accept_ratio: 0.9,
                    ensemble_size: 16,
                    min_ensemble: 8,
                    warm_start: false,
                    ensemble_bin: None,
                },
                attack: AttackSection {
                    epsilon: 0.03,
                    high_confidence: 0.9,
                },
                detector: DetectorSection {
                    alpha: 0.05,
                    beta: 0.05,
                    sigma_fraction: 0.1,
                    max_models: 100,
                    calibration: CalibrationKind::Youden,
                    quantile: 0.95,
                },
            },
            Profile::PaperScale => {
                let mut c = Self::profile(Profile::Smoke);
                c.out = PathBuf::from("runs/paper-scale");
                c.dataset.classes = 10;
                c.dataset.per_class = 1000;
                c.graphs.bins = (0..7).map(|i| [3.0 + 2.0 * i as f64, 5.0 + 2.0 * i as f64]).collect();
                c.graphs.per_bin = 100;
                c.training.pruned_epochs = 30;
                c.training.ensemble_size = 100;
                c.training.min_ensemble = 50;
                c
            }
        }
    }

    /// Profile defaults overlaid with the tables of a TOML document.
    pub fn from_toml(profile: Profile, text: &str) -> Result<Self, ConfigError> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        let base = toml::Table::try_from(Self::profile(profile))
            .map_err(|e| ConfigError(e.to_string()))?;
        let merged = merge(base, overlay);
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(profile: Profile, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(profile, &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset_config()
            .validate()
            .or_else(|e| invalid(format!("dataset: {e}")))?;
        let spec = self.model_spec();
        spec.geometry().or_else(|e| invalid(format!("model: {e}")))?;

        let g = &self.graphs;
        if g.nodes < 3 || g.nodes > MAX_NODES {
            return invalid(format!("graphs.nodes must be in 3..={MAX_NODES}"));
        }
        if g.degree < 2 || g.degree >= g.nodes || (g.nodes * g.degree) % 2 == 1 {
            return invalid(format!(
                "no connected {}-regular graph on {} nodes",
                g.degree, g.nodes
            ));
        }
        if self.model.conv_channels < g.nodes || self.model.hidden_units < g.nodes {
            return invalid(format!(
                "layer widths ({}, {}) must be at least graphs.nodes ({})",
                self.model.conv_channels, self.model.hidden_units, g.nodes
            ));
        }
        if g.bins.is_empty() {
            return invalid("graphs.bins is empty");
        }
        for t in self.targets()? {
            t.validate().or_else(|e| invalid(format!("graphs.bins: {e}")))?;
        }
        for w in g.bins.windows(2) {
            if w[1][0] < w[0][1] {
                return invalid(format!(
                    "graphs.bins must be ascending and disjoint: {:?} then {:?}",
                    w[0], w[1]
                ));
            }
        }
        if g.per_bin == 0 || g.restart_factor == 0 || g.max_tries == 0 {
            return invalid("graphs.per_bin, restart_factor and max_tries must be positive");
        }

        let t = &self.training;
        self.hyper(0, t.epochs)
            .validate()
            .or_else(|e| invalid(format!("training: {e}")))?;
        if !(t.accept_ratio > 0.0 && t.accept_ratio <= 1.0) {
            return invalid("training.accept_ratio must be in (0, 1]");
        }
        if t.ensemble_size == 0 || t.ensemble_size > g.per_bin {
            return invalid("training.ensemble_size must be in 1..=graphs.per_bin");
        }
        if t.min_ensemble == 0 || t.min_ensemble > t.ensemble_size {
            return invalid("training.min_ensemble must be in 1..=ensemble_size");
        }
        if let Some(b) = t.ensemble_bin {
            if b >= g.bins.len() {
                return invalid(format!("training.ensemble_bin {b} out of range"));
            }
            let bound = aspl_lower_bound(g.nodes, g.degree);
            if bound >= g.bins[b][1] {
                return invalid(format!(
                    "training.ensemble_bin {:?} lies below the ASPL lower bound {bound:.4}",
                    g.bins[b]
                ));
            }
        }

        let a = &self.attack;
        if !(a.epsilon > 0.0 && a.epsilon < 1.0) {
            return invalid("attack.epsilon must be in (0, 1)");
        }
        if !(a.high_confidence > 0.0 && a.high_confidence < 1.0) {
            return invalid("attack.high_confidence must be in (0, 1)");
        }

        self.sprt_params()
            .validate()
            .or_else(|e| invalid(format!("detector: {e}")))?;
        if !(0.0..=1.0).contains(&self.detector.quantile) {
            return invalid("detector.quantile must be in [0, 1]");
        }
        Ok(())
    }

    pub fn seed_for(&self, stream: u64) -> u64 {
        rng::derive_seed(self.seed, stream)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            classes: d.classes,
            per_class: d.per_class,
            shape: d.shape,
            contrast: d.contrast,
            noise: d.noise,
            seed: self.seed_for(streams::DATASET),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::with_widths(
            self.dataset.shape,
            self.dataset.classes,
            self.model.conv_channels,
            self.model.hidden_units,
        )
    }

    pub fn targets(&self) -> Result<Vec<AsplTarget>, ConfigError> {
        self.graphs
            .bins
            .iter()
            .map(|&[lo, hi]| {
                AsplTarget::new(lo, hi, self.graphs.max_swaps)
                    .or_else(|e| invalid(format!("graphs.bins: {e}")))
            })
            .collect()
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            max_tries: self.graphs.max_tries,
            restart_factor: self.graphs.restart_factor,
        }
    }

    pub fn hyper(&self, seed: u64, epochs: usize) -> TrainHyper {
        TrainHyper {
            epochs,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            seed,
        }
    }

    pub fn sprt_params(&self) -> SprtParams {
        let d = &self.detector;
        SprtParams {
            alpha: d.alpha,
            beta: d.beta,
            sigma_fraction: d.sigma_fraction,
            max_models: d.max_models,
        }
    }

    pub fn calibration_mode(&self) -> CalibrationMode {
        match self.detector.calibration {
            CalibrationKind::Youden => CalibrationMode::Youden,
            CalibrationKind::Quantile => CalibrationMode::Quantile(self.detector.quantile),
        }
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ExperimentConfig::profile(Profile::Smoke).validate().unwrap();
        ExperimentConfig::profile(Profile::PaperScale).validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::profile(Profile::PaperScale);
        let back = ExperimentConfig::from_toml(Profile::Smoke, &c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overlay_replaces_only_given_keys() {
        let c = ExperimentConfig::from_toml(Profile::Smoke, "seed = 3\n[graphs]\nper_bin = 24\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.graphs.per_bin, 24);
        assert_eq!(c.graphs.nodes, 64);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "[graphs]\nbins = [[5.0, 7.0], [3.0, 5.0]]",
            "[graphs]\nbins = [[3.0, 5.0], [4.0, 7.0]]",
            "[graphs]\ndegree = 3\nnodes = 63",
            "[training]\nensemble_size = 21",
            "[training]\naccept_ratio = 1.01",
            "[training]\nensemble_bin = 0\n[graphs]\nbins = [[1.0, 3.0]]",
            "[detector]\nalpha = 0.0",
            "[dataset]\nper_class = 5",
            "[model]\nhidden_units = 32",
            "unknown = 1",
        ] {
            assert!(ExperimentConfig::from_toml(Profile::Smoke, text).is_err(), "{text}");
        }
    }
}
