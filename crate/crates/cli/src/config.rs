//! Run configuration: a TOML file merged with command-line overrides.
//!
//! The schema is documented in `config/reference.toml` at the repository
//! root. Every command writes the merged configuration next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use malbyte::ingest::UnknownBytePolicy;
use malbyte::models::{Architecture, ModelConfig};
use malbyte::resample::Interpolation;
use malbyte::train_eval::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub interpolation: Interpolation,
    pub unknown_bytes: UnknownBytePolicy,
}

/// Architecture plus optional overrides of its reference hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub seed: u64,
    pub input_len: Option<usize>,
    pub conv_filters: Option<Vec<usize>>,
    pub kernel_width: Option<usize>,
    pub pool_width: Option<usize>,
    pub dense_units: Option<usize>,
    pub lstm_hidden: Option<usize>,
    pub dropout_dense: Option<f64>,
    pub dropout_lstm: Option<f64>,
    pub l2_lambda: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: Architecture::CnnBiLstm,
            seed: 0,
            input_len: None,
            conv_filters: None,
            kernel_width: None,
            pool_width: None,
            dense_units: None,
            lstm_hidden: None,
            dropout_dense: None,
            dropout_lstm: None,
            l2_lambda: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> ModelConfig {
        self.resolve_for(self.architecture)
    }

    pub fn resolve_for(&self, architecture: Architecture) -> ModelConfig {
        let r = ModelConfig::reference(architecture);
        ModelConfig {
            architecture,
            seed: self.seed,
            input_len: self.input_len.unwrap_or(r.input_len),
            conv_filters: self.conv_filters.clone().unwrap_or(r.conv_filters),
            kernel_width: self.kernel_width.unwrap_or(r.kernel_width),
            pool_width: self.pool_width.unwrap_or(r.pool_width),
            dense_units: self.dense_units.unwrap_or(r.dense_units),
            lstm_hidden: self.lstm_hidden.unwrap_or(r.lstm_hidden),
            num_classes: r.num_classes,
            dropout_dense: self.dropout_dense.unwrap_or(r.dropout_dense),
            dropout_lstm: self.dropout_lstm.unwrap_or(r.dropout_lstm),
            l2_lambda: self.l2_lambda.unwrap_or(r.l2_lambda),
        }
    }

    /// Replaces every override with its resolved value, for provenance.
    pub fn fill(&mut self) {
        let m = self.resolve();
        self.input_len = Some(m.input_len);
        self.conv_filters = Some(m.conv_filters);
        self.kernel_width = Some(m.kernel_width);
        self.pool_width = Some(m.pool_width);
        self.dense_units = Some(m.dense_units);
        self.lstm_hidden = Some(m.lstm_hidden);
        self.dropout_dense = Some(m.dropout_dense);
        self.dropout_lstm = Some(m.dropout_lstm);
        self.l2_lambda = Some(m.l2_lambda);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    pub parallel_folds: bool,
    /// Stratified fraction of the corpus to use, in (0, 1].
    pub subsample: f64,
    /// Run all three architectures with both samplers.
    pub compare: bool,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection {
            folds: 5,
            parallel_folds: true,
            subsample: 1.0,
            compare: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub paths: Paths,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub cv: CvSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.model.fill();
        toml::to_string(&c).expect("config serializes")
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_config_round_trips() {
        let mut c = RunConfig::default();
        c.paths.data_dir = Some("data".into());
        c.model.dense_units = Some(64);
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back.model.resolve(), c.model.resolve());
        assert_eq!(back.paths, c.paths);
        assert_eq!(back.train, c.train);
    }

    #[test]
    fn reference_schema_file_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/reference.toml");
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.model.resolve(), ModelConfig::reference(Architecture::CnnBiLstm));
        assert_eq!(c.train, TrainConfig {
            sampler: malbyte::sampling::SamplerMode::Rebalance,
            ..TrainConfig::default()
        });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
    }
}
