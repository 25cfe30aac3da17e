//! Experiment configuration.
//!
//! The file format is TOML restricted to what a flat key-value file needs:
//! dotted keys such as `fusion.epsilon0 = 0.8` plus an optional `[[domains]]`
//! array. Every key has a desk-scale default, so an empty file is valid.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fedstyle::MixConfig;
use crate::fusion::{FusionConfig, FusionMode};
use crate::inference::{InferenceConfig, SelectionStrategy};
use crate::params::LayerPartition;
use crate::sim::data::{default_domains, DomainSpec};
use crate::sim::model::{Architecture, TrainConfig};
use crate::tree::ThresholdSchedule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Tree,
    Star,
}

impl Topology {
    pub fn name(&self) -> &'static str {
        match self {
            Topology::Tree => "tree",
            Topology::Star => "star",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            lr: 1.0,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    pub tau0: f64,
    pub beta: f64,
    pub max_height: usize,
}

impl Default for TreeSection {
    fn default() -> Self {
        Self {
            tau0: 0.85,
            beta: 0.06,
            max_height: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub mode: FusionMode,
    pub epsilon0: f64,
    pub omega: f64,
    /// Layers kept personal under progressive fusion.
    pub fixed_layers: Vec<String>,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            mode: FusionMode::Progressive,
            epsilon0: 0.8,
            omega: 0.5,
            fixed_layers: vec!["head".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleSection {
    pub enabled: bool,
    pub phi: f64,
    pub mix_prob: f64,
    pub epsilon: f64,
}

impl Default for StyleSection {
    fn default() -> Self {
        let mix = MixConfig::default();
        Self {
            enabled: true,
            phi: mix.phi,
            mix_prob: mix.activation_prob,
            epsilon: mix.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub selection: SelectionStrategy,
    pub depth_coeff: f64,
    pub histogram_bins: usize,
    pub extractor_seed: u64,
    pub extractor_filters: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            selection: SelectionStrategy::AllWeighted,
            depth_coeff: 0.5,
            histogram_bins: 16,
            extractor_seed: 0x5eed_f00d,
            extractor_filters: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kernels: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            kernels: arch.kernels,
            hidden: arch.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub topology: Topology,
    pub train: TrainSection,
    pub tree: TreeSection,
    pub fusion: FusionSection,
    pub style: StyleSection,
    pub inference: InferenceSection,
    pub model: ModelSection,
    pub domains: Vec<DomainSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 15,
            topology: Topology::Tree,
            train: TrainSection::default(),
            tree: TreeSection::default(),
            fusion: FusionSection::default(),
            style: StyleSection::default(),
            inference: InferenceSection::default(),
            model: ModelSection::default(),
            domains: default_domains(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.rounds < 1 {
            return invalid("rounds must be >= 1".into());
        }
        if self.train.local_epochs < 1 {
            return invalid("train.local_epochs must be >= 1".into());
        }
        if self.train.batch_size < 1 {
            return invalid("train.batch_size must be >= 1".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return invalid(format!("train.lr must be finite and >= 0, got {}", self.train.lr));
        }
        if self.model.kernels < 1 || self.model.hidden < 1 {
            return invalid("model.kernels and model.hidden must be >= 1".into());
        }
        if self.inference.histogram_bins < 1 || self.inference.extractor_filters < 1 {
            return invalid("inference.histogram_bins and inference.extractor_filters must be >= 1".into());
        }
        if !self.inference.depth_coeff.is_finite() {
            return invalid("inference.depth_coeff must be finite".into());
        }
        self.schedule()?;
        self.fusion_config()?;
        self.mix_config()?;
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.domains {
            d.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !ids.insert(d.domain_id) {
                return invalid(format!("duplicate domain id {}", d.domain_id));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Architecture {
        Architecture {
            kernels: self.model.kernels,
            hidden: self.model.hidden,
        }
    }

    pub fn schedule(&self) -> Result<ThresholdSchedule, ConfigError> {
        ThresholdSchedule::new(self.tree.tau0, self.tree.beta, self.tree.max_height)
            .map_err(|e| ConfigError::Invalid(format!("tree: {e}")))
    }

    pub fn fusion_config(&self) -> Result<FusionConfig, ConfigError> {
        let partition = LayerPartition::with_fixed(&self.arch().layout(), &self.fusion.fixed_layers)
            .map_err(|e| ConfigError::Invalid(format!("fusion.fixed_layers: {e}")))?;
        FusionConfig::new(self.fusion.epsilon0, self.fusion.omega, partition)
            .map_err(|e| ConfigError::Invalid(format!("fusion: {e}")))
    }

    pub fn mix_config(&self) -> Result<MixConfig, ConfigError> {
        let cfg = MixConfig {
            phi: self.style.phi,
            activation_prob: self.style.mix_prob,
            epsilon: self.style.epsilon,
        };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(format!("style: {e}")))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.local_epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            selection: self.inference.selection,
            depth_coeff: self.inference.depth_coeff,
            arch: self.arch(),
            histogram_bins: self.inference.histogram_bins,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.rounds, 15);
        assert_eq!(cfg.tree.tau0, 0.85);
        assert_eq!(cfg.domains.len(), 4);
    }

    #[test]
    fn dotted_keys() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 7\ntopology = \"star\"\nfusion.epsilon0 = 0.3\nfusion.mode = \"direct\"\n\
             style.enabled = false\ninference.selection = \"root-mid\"\ntree.max_height = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.topology, Topology::Star);
        assert_eq!(cfg.fusion.epsilon0, 0.3);
        assert_eq!(cfg.fusion.mode, FusionMode::Direct);
        assert!(!cfg.style.enabled);
        assert_eq!(cfg.inference.selection, SelectionStrategy::RootMid);
        assert_eq!(cfg.tree.max_height, 2);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "rounds = 0",
            "train.local_epochs = 0",
            "tree.max_height = 0",
            "fusion.epsilon0 = 1.5",
            "fusion.omega = 1.0",
            "fusion.fixed_layers = [\"nope\"]",
            "style.mix_prob = 2.0",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(ConfigError::Invalid(_))),
                "{text}"
            );
        }
        assert!(matches!(
            ExperimentConfig::from_toml("tree.bogus = 1"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("topology = \"ring\""),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn missing_file_is_read_error() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/treefed.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Read { .. }));
    }
}
