//! Experiment configuration documents.
//!
//! A config file is a JSON object with a `schema_version` and the sections `data`, `model`,
//! `train` and `eval`. Keys left out take the values of [`ExperimentConfig::default`], which
//! `glagan default-config` prints; unknown keys are rejected.

use std::path::Path;

use glagan::evaluation::CvConfig;
use glagan::generator::ModelConfig;
use glagan::losses::Ablation;
use glagan::phantom::PhantomSpec;
use glagan::training::TrainConfig;
use glagan::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Phantom cohort generation and the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_subjects: usize,
    /// Fraction of AD subjects among all subjects.
    pub ad_fraction: f64,
    /// Subjects whose PET is dropped after generation.
    pub n_mri_only: usize,
    /// Fraction of paired subjects held out for `evaluate`.
    pub test_fraction: f64,
    /// Fraction of paired subjects used for checkpoint selection.
    pub val_fraction: f64,
    pub phantom: PhantomSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub cv: CvConfig,
    pub interpolation_steps: usize,
    /// Loss-term combinations trained side by side by `train`; empty means the `train` weights.
    pub ablations: Vec<Ablation>,
    /// Patch counts trained side by side by `train`; empty means `model.k_patches`.
    pub k_patches: Vec<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_subjects: 80,
            ad_fraction: 0.4,
            n_mri_only: 0,
            test_fraction: 0.2,
            val_fraction: 0.1,
            phantom: PhantomSpec::default(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { cv: CvConfig::default(), interpolation_steps: 9, ablations: Vec::new(), k_patches: Vec::new() }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataSection::default();
        let model = ModelConfig { resolution: data.phantom.shape, ..ModelConfig::default() };
        Self { schema_version: SCHEMA_VERSION, data, model, train: TrainConfig::default(), eval: EvalSection::default() }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text).map_err(config_error)?;
        match over.get("schema_version") {
            None => return Err(config_error("missing `schema_version`")),
            Some(v) if v.as_u64() != Some(SCHEMA_VERSION as u64) => {
                return Err(config_error(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}")))
            }
            Some(_) => {}
        }
        let mut full = serde_json::to_value(Self::default()).map_err(config_error)?;
        merge(&mut full, over);
        let cfg: Self = serde_json::from_value(full).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.phantom.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.ad_fraction) {
            return Err(config_error("data.ad_fraction must lie in [0, 1]"));
        }
        if d.n_mri_only > d.n_subjects {
            return Err(config_error("data.n_mri_only exceeds data.n_subjects"));
        }
        if !(d.test_fraction >= 0.0 && d.val_fraction >= 0.0 && d.test_fraction + d.val_fraction < 1.0) {
            return Err(config_error("data.test_fraction and data.val_fraction must be nonnegative and sum below 1"));
        }
        if self.eval.cv.folds < 2 {
            return Err(config_error("eval.cv.folds must be at least 2"));
        }
        if self.eval.interpolation_steps < 2 {
            return Err(config_error("eval.interpolation_steps must be at least 2"));
        }
        Ok(())
    }

    /// Overrides every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.phantom.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.cv.seed = seed;
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.resolution, cfg.data.phantom.shape);
    }

    #[test]
    fn default_round_trips() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&d.canonical_json()).unwrap(), d);
        assert_eq!(d.sha256().len(), 64);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_version() {
        for bad in [
            r#"{"schema_version": 1, "trian": {}}"#,
            r#"{"schema_version": 1, "train": {"epoch": 3}}"#,
            r#"{"schema_version": 1, "model": {"ms_ssim": {"scales": 2}}}"#,
            r#"{"train": {}}"#,
            r#"{"schema_version": 7}"#,
            r#"{"schema_version": 1, "data": {"test_fraction": 0.9, "val_fraction": 0.2}}"#,
            "not json",
        ] {
            assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::InvalidConfig(_))), "{bad}");
        }
    }

    #[test]
    fn seed_override_changes_hash() {
        let mut c = ExperimentConfig::default();
        let h = c.sha256();
        c.set_seed(42);
        assert_ne!(c.sha256(), h);
        assert_eq!(c.train.seed, 42);
    }
}
