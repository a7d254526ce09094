use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::harmonic_mean;
use super::profile::{AugmentationProfile, ProjectedPoint};
use crate::augment::AugmentationKind;
use crate::error::{Error, Result};
use crate::prompt::ModelMode;
use crate::train::csv_err;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    BaseToNew,
    CrossDataset,
    DomainShift,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::BaseToNew => "base_to_new",
            Protocol::CrossDataset => "cross_dataset",
            Protocol::DomainShift => "domain_shift",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "base_to_new" => Ok(Protocol::BaseToNew),
            "cross_dataset" => Ok(Protocol::CrossDataset),
            "domain_shift" => Ok(Protocol::DomainShift),
            other => Err(Error::Config(format!("unknown protocol '{other}'"))),
        }
    }
}

/// Accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub dataset: String,
    pub base: f64,
    pub new: f64,
    pub hm: f64,
}

impl SplitRow {
    pub fn new(dataset: impl Into<String>, base: f64, new: f64) -> Result<Self> {
        Ok(Self {
            dataset: dataset.into(),
            base,
            new,
            hm: harmonic_mean(base, new)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowRole {
    Source,
    Target,
}

/// Accuracy in percent on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: String,
    pub role: RowRole,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub meta_by_kind: BTreeMap<AugmentationKind, f64>,
    pub delta_by_kind: BTreeMap<AugmentationKind, f64>,
    pub meta_mean: f64,
    pub delta_mean: f64,
}

impl From<&AugmentationProfile> for ProfileSummary {
    fn from(p: &AugmentationProfile) -> Self {
        Self {
            meta_by_kind: p.meta_by_kind.clone(),
            delta_by_kind: p.delta_by_kind.clone(),
            meta_mean: p.meta_mean,
            delta_mean: p.delta_mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub mode: ModelMode,
    /// Base/new rows (base-to-new protocol).
    pub splits: Vec<SplitRow>,
    /// Per-dataset rows (cross-dataset and domain-shift protocols).
    pub targets: Vec<TargetRow>,
    /// Mean accuracy over the target rows.
    pub average: Option<f64>,
    pub profile: Option<ProfileSummary>,
    /// Data, init and order seeds of the evaluated run.
    pub seeds: Vec<u64>,
    pub config_fingerprint: String,
    pub params_fingerprint: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Version {
                expected: REPORT_SCHEMA_VERSION.to_string(),
                found: self.schema_version.to_string(),
            });
        }
        for row in &self.splits {
            if harmonic_mean(row.base, row.new)? != row.hm {
                return Err(Error::contract(format!(
                    "stored harmonic mean of '{}' does not match its accuracies",
                    row.dataset
                )));
            }
        }
        if self.average != target_average(&self.targets) {
            return Err(Error::contract("stored average does not match the target rows"));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        report.validate()?;
        Ok(report)
    }

    /// Writes `report.json` and the protocol's CSV table into `dir`,
    /// returning the written paths.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let json = dir.join("report.json");
        self.save_json(&json)?;
        let table = dir.join(format!("report_{}.csv", self.protocol.name()));
        let mut w = csv::Writer::from_path(&table).map_err(csv_err)?;
        match self.protocol {
            Protocol::BaseToNew => {
                w.write_record(["dataset", "base", "new", "hm"]).map_err(csv_err)?;
                for r in &self.splits {
                    w.write_record([r.dataset.clone(), r.base.to_string(), r.new.to_string(), r.hm.to_string()])
                        .map_err(csv_err)?;
                }
            }
            Protocol::CrossDataset | Protocol::DomainShift => {
                w.write_record(["target", "accuracy"]).map_err(csv_err)?;
                for r in &self.targets {
                    w.write_record([r.target.clone(), r.accuracy.to_string()]).map_err(csv_err)?;
                }
                if let Some(avg) = self.average {
                    w.write_record(["average".to_string(), avg.to_string()]).map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(vec![json, table])
    }
}

pub(crate) fn target_average(rows: &[TargetRow]) -> Option<f64> {
    let targets: Vec<f64> = rows
        .iter()
        .filter(|r| r.role == RowRole::Target)
        .map(|r| r.accuracy)
        .collect();
    if targets.is_empty() {
        None
    } else {
        Some(targets.iter().sum::<f64>() / targets.len() as f64)
    }
}

/// Writes `profile_silhouette.csv` (kind, meta, delta) and one projection
/// CSV per token type into `dir`.
pub fn export_profile(profile: &AugmentationProfile, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let scores = dir.join("profile_silhouette.csv");
    let mut w = csv::Writer::from_path(&scores).map_err(csv_err)?;
    w.write_record(["kind", "meta", "delta"]).map_err(csv_err)?;
    for (kind, meta) in &profile.meta_by_kind {
        let delta = profile.delta_by_kind.get(kind).copied().unwrap_or(f64::NAN);
        w.write_record([kind.name().to_string(), meta.to_string(), delta.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    let mut out = vec![scores];
    for (name, points) in [("meta", &profile.meta_projection), ("delta", &profile.delta_projection)] {
        let path = dir.join(format!("profile_{name}.csv"));
        write_projection(points, &path)?;
        out.push(path);
    }
    Ok(out)
}

fn write_projection(points: &[ProjectedPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["x", "y", "kind", "class", "token_type"]).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.kind.map_or("identity", |k| k.name()).to_string(),
            p.class_id.to_string(),
            p.token_type.name().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
