//! The run configuration: one JSON document drives the whole pipeline.
//! Unknown keys are rejected; flags override config keys, which override
//! the defaults baked in here. The canonical JSON of the effective config
//! is digested into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sentinel_core::attack::AttackConfig;
use sentinel_core::data::AugmentConfig;
use sentinel_core::detect::default_eps_grid;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackConfig>,
    /// Cap on how many test samples each attack is crafted on.
    #[serde(default)]
    pub attack_sample_cap: Option<usize>,
    #[serde(default)]
    pub floors: Vec<MetricFloor>,
    #[serde(default)]
    pub strict: bool,
}

fn default_attacks() -> Vec<AttackConfig> {
    vec![
        AttackConfig::fgsm_default(),
        AttackConfig::bim_default(),
        AttackConfig::deepfool_default(),
        AttackConfig::cw_default(),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory-per-class image tree for the in-distribution task.
    #[serde(default)]
    pub in_dist_dir: Option<PathBuf>,
    /// Directory-per-class image tree used as the OOD source.
    #[serde(default)]
    pub ood_dir: Option<PathBuf>,
    /// Synthetic generator settings (used when `in_dist_dir` is absent;
    /// also generates the OOD set when `ood_dir` is absent).
    #[serde(default)]
    pub synth: Option<SynthSection>,
    /// Images are resized to this square size before anything else.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_split")]
    pub split: SplitFractions,
}

fn default_input_size() -> usize {
    125
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_per_class: usize,
    #[serde(default = "default_ood_n")]
    pub ood_n_per_class: usize,
}

fn default_ood_n() -> usize {
    60
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

fn default_split() -> SplitFractions {
    SplitFractions { train: 0.6, val: 0.1, test: 0.3 }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub augment: AugmentConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub eps_grid: Vec<f32>,
    pub lambda: Option<f64>,
    pub lid_k: usize,
    pub lid_reference: usize,
    pub odin_temperature: f32,
    pub odin_eps: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            eps_grid: default_eps_grid(),
            lambda: None,
            lid_k: 20,
            lid_reference: 100,
            odin_temperature: 1000.0,
            odin_eps: 0.0014,
        }
    }
}

/// A minimum a reported metric must reach; rows are matched by optional
/// detector/source filters. Values are fractions in [0,1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetricFloor {
    #[serde(default)]
    pub detector: Option<String>,
    #[serde(default)]
    pub source: Option<String>,
    pub metric: String,
    pub min: f64,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.in_dist_dir.is_none() && self.data.synth.is_none() {
            return Err(CliError::usage(
                "config needs either data.in_dist_dir or data.synth",
            ));
        }
        if self.data.input_size < 8 {
            return Err(CliError::usage("data.input_size must be at least 8"));
        }
        let s = &self.data.split;
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(CliError::usage("data.split fractions must sum to 1"));
        }
        for attack in &self.attacks {
            attack.validate().map_err(|e| CliError::usage(e.to_string()))?;
        }
        for floor in &self.floors {
            if !(0.0..=1.0).contains(&floor.min) {
                return Err(CliError::usage(format!(
                    "floor {} must lie in [0,1]",
                    floor.metric
                )));
            }
        }
        Ok(())
    }

    /// Canonical JSON of the effective config.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON text.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&self.canonical_json()).expect("value serializes");
        let out = Sha256::digest(text.as_bytes());
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
