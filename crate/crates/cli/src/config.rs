//! Experiment configuration: JSON in, unknown keys rejected, stable
//! round trips.

use batclip_core::adapt::{AdaptConfig, Method};
use batclip_core::corrupt::CorruptionKind;
use batclip_core::error::{Error, Result};
use batclip_core::model::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Shapes { n_per_class: usize, classes: usize, image_size: usize, seed: u64 },
    Cifar10 { dir: PathBuf, #[serde(default)] max_images: Option<usize> },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Shapes { n_per_class: 400, classes: 5, image_size: 16, seed: 2000 }
    }
}

/// Pretraining section: optimizer settings plus the shapes split that
/// stands in for the pretraining corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub n_per_class: usize,
    pub data_seed: u64,
    pub holdout_per_class: usize,
    pub holdout_seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 45,
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.01,
            seed: 7,
            n_per_class: 120,
            data_seed: 1000,
            holdout_per_class: 40,
            holdout_seed: 3000,
        }
    }
}

impl PretrainSection {
    pub fn optimizer_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub prompt_template: String,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub pretrain: PretrainSection,
    pub adapt: AdaptConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub eval_source_after: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            prompt_template: "a photo of a <CLS>.".to_string(),
            corruptions: vec![
                CorruptionKind::GaussianNoise,
                CorruptionKind::DefocusBlur,
                CorruptionKind::Contrast,
            ],
            severities: vec![5],
            pretrain: PretrainSection::default(),
            adapt: AdaptConfig { batch_size: 32, ..AdaptConfig::default() },
            methods: vec![Method::ZeroShot, Method::EntropyOnly, Method::Batclip],
            seeds: vec![0, 1, 2],
            eval_source_after: false,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.severities.iter().find(|&&s| s > 5) {
            return Err(Error::Config(format!("severity {bad} out of range 0..=5")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method required".into()));
        }
        self.adapt.validate()
    }

    /// Apply a CLI seed override: replaces the sweep seeds and reseeds the
    /// adaptation config.
    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
            self.adapt.seed = s;
            self.pretrain.seed = s;
        }
        self
    }

    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        batclip_core::report::fingerprint(&value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_stable() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{ "dataset": {"kind": "shapes", "n_per_class": 4, "classes": 5,
            "image_size": 16, "seed": 0}, "bogus_key": 1 }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
        let nested = r#"{ "adapt": { "lr": 0.001, "mystery": true } }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(nested).is_err());
    }

    #[test]
    fn partial_sections_use_defaults() {
        let json = r#"{ "adapt": { "lr": 0.01 }, "seeds": [9] }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.adapt.lr, 0.01);
        assert_eq!(cfg.adapt.batch_size, 200);
        assert_eq!(cfg.seeds, vec![9]);
    }

    #[test]
    fn method_list_parses_plain_and_parameterized() {
        let json = r#"{ "methods": ["zero_shot", "batclip",
            {"ablation": {"lambda_pm": 0.1, "lambda_sp": 0.1, "scope": "ln_vision"}}] }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.methods.len(), 3);
        assert_eq!(cfg.methods[2].label(), "ablation_pm0.1_sp0.1_ln_vision");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.adapt.lr = 0.5;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
