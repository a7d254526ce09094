//! Experiment configuration: one strict JSON document plus `--set`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use aapl_core::data::{DatasetConfig, PrototypeFamily, ShiftConfig, ShiftKind};
use aapl_core::eval::Protocol;
use aapl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Seed of the base/new partition; `None` uses the data seed.
    pub split_seed: Option<u64>,
    pub protocol: Protocol,
    /// Datasets scored zero-shot by the cross-dataset protocol. Target `i`
    /// is generated with seed `data + 1 + i`.
    pub targets: Vec<DatasetConfig>,
    /// Perturbations scored by the domain-shift protocol.
    pub shifts: Vec<ShiftConfig>,
    pub profile_points: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            split_seed: None,
            protocol: Protocol::BaseToNew,
            targets: vec![DatasetConfig {
                name: "shapes".into(),
                family: PrototypeFamily::Shapes,
                class_id_offset: 1000,
                ..DatasetConfig::default()
            }],
            shifts: vec![
                ShiftConfig {
                    kind: ShiftKind::Brightness,
                    magnitude: 0.2,
                },
                ShiftConfig {
                    kind: ShiftKind::Contrast,
                    magnitude: 0.4,
                },
                ShiftConfig {
                    kind: ShiftKind::Noise,
                    magnitude: 0.1,
                },
            ],
            profile_points: 100,
            output_dir: PathBuf::from("runs/experiment"),
        }
    }
}

impl ExperimentConfig {
    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.train.seeds.data)
    }

    pub fn target_seed(&self, index: usize) -> u64 {
        self.train.seeds.data.wrapping_add(1 + index as u64)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.profile_points < 2 {
            return Err(CliError::Config("profile_points must be at least 2".into()));
        }
        for t in &self.targets {
            if t.name == self.dataset.name {
                return Err(CliError::Config(format!(
                    "target '{}' shares its name with the source dataset",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Parses `text` strictly; errors carry `origin:line:column`.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides in order. Keys are dotted paths into
    /// the document; a key that is not top-level but names a training
    /// field (`alpha`, `seeds.order`) resolves under `train`. Values parse
    /// as JSON and fall back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).map_err(aapl_core::Error::from)?;
        for spec in overrides {
            let (key, raw) = spec
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set {spec}: expected key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let path = resolve_key(&doc, key)
                .ok_or_else(|| CliError::Config(format!("--set {spec}: unknown key '{key}'")))?;
            let slot = path
                .iter()
                .try_fold(&mut doc, |node, part| node.get_mut(part.as_str()))
                .expect("resolved path exists");
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(format!("--set: {e}")))
    }

    pub fn to_pretty_json(&self) -> Result<String, CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(aapl_core::Error::from)?;
        text.push('\n');
        Ok(text)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(aapl_core::Error::from)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_pretty_json()?).map_err(aapl_core::Error::from)?;
        Ok(path)
    }
}

fn lookup<'a>(doc: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(doc, |node, part| node.as_object()?.get(part.as_str()))
}

fn resolve_key(doc: &Value, key: &str) -> Option<Vec<String>> {
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if parts.iter().any(String::is_empty) {
        return None;
    }
    if lookup(doc, &parts).is_some() {
        return Some(parts);
    }
    let mut under_train = vec!["train".to_string()];
    under_train.extend(parts);
    lookup(doc, &under_train).map(|_| under_train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aapl_core::prompt::ModelMode;

    fn set(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}", "x").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = ExperimentConfig::from_json("{\n  \"train\": {\n    \"alpah\": 0.2\n  }\n}", "cfg.json")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("cfg.json:3:"), "{err}");
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn shorthand_and_dotted_overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&set(&[
                "mode=cocoop",
                "alpha=0.5",
                "train.beta=2",
                "seeds.order=9",
                "dataset.num_classes=10",
                "protocol=cross_dataset",
            ]))
            .unwrap();
        assert_eq!(cfg.train.mode, ModelMode::ConditionalCocoop);
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.train.beta, 2.0);
        assert_eq!(cfg.train.seeds.order, 9);
        assert_eq!(cfg.dataset.num_classes, 10);
        assert_eq!(cfg.protocol, Protocol::CrossDataset);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let base = ExperimentConfig::default();
        for bad in ["nope=1", "alpha", "alpha=\"x\"", "train..alpha=1", "mode=unknown"] {
            assert!(
                matches!(base.with_overrides(&set(&[bad])), Err(CliError::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn optional_fields_accept_overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&set(&["split_seed=4", "augmentations=[\"hue\",\"grayscale\"]"]))
            .unwrap();
        assert_eq!(cfg.split_seed(), 4);
        assert_eq!(cfg.train.augmentations.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::default().with_overrides(&set(&["margin=0.3"])).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_pretty_json().unwrap(), "resolved").unwrap();
        assert_eq!(back, cfg);
    }
}
