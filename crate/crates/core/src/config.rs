//! JSON run-configuration files. Unknown keys are rejected; omitted keys
//! take the documented defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aetrain::AeArch;
use crate::error::{Error, Result};
use crate::fairmetrics::FairnessDomain;
use crate::harness::ModelKind;
use crate::kdereg::{PenaltyConfig, PenaltyKind};
use crate::mftrain::TrainConfig;
use crate::types::ValueDomain;

/// Parse a JSON document, attributing failures to `path`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(&text).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse { path: path.display().to_string(), line, message },
        other => other,
    })
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse { path: "<config>".into(), line: e.line(), message: e.to_string() })
}

/// Penalty section of a training config. `tau` and `lambda` default by
/// value domain when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySection {
    pub kind: PenaltyKind,
    pub tau: Option<f64>,
    pub bandwidth: f64,
    pub huber_delta: f64,
    pub lambda: Option<f64>,
}

impl Default for PenaltySection {
    fn default() -> Self {
        PenaltySection { kind: PenaltyKind::None, tau: None, bandwidth: 0.01, huber_delta: 0.01, lambda: None }
    }
}

/// 0.99 for binary data, 0.9 for star ratings.
pub fn default_lambda(domain: ValueDomain) -> f64 {
    match domain {
        ValueDomain::Binary => 0.99,
        ValueDomain::Stars => 0.9,
    }
}

impl PenaltySection {
    pub fn resolve(&self, domain: ValueDomain) -> Result<PenaltyConfig> {
        let lambda = match (self.kind, self.lambda) {
            (_, Some(l)) => l,
            (PenaltyKind::None, None) => 0.0,
            (_, None) => default_lambda(domain),
        };
        let cfg = PenaltyConfig {
            kind: self.kind,
            tau: self.tau.unwrap_or_else(|| domain.default_threshold()),
            bandwidth: self.bandwidth,
            huber_delta: self.huber_delta,
            lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Config file of `fairmc train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub model: ModelKind,
    pub penalty: PenaltySection,
    pub train: TrainConfig,
    pub ae: Option<AeArch>,
    pub train_fraction: f64,
    pub topk: Vec<usize>,
    pub fairness_domain: FairnessDomain,
}

impl Default for TrainFile {
    fn default() -> Self {
        TrainFile {
            model: ModelKind::Mf,
            penalty: PenaltySection::default(),
            train: TrainConfig::default(),
            ae: None,
            train_fraction: 0.9,
            topk: Vec::new(),
            fairness_domain: FairnessDomain::All,
        }
    }
}

/// Written next to a checkpoint so evaluation can rebuild the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub model: ModelKind,
    pub penalty: PenaltyConfig,
    pub train: TrainConfig,
    pub ae: Option<AeArch>,
    pub train_fraction: f64,
    pub fairness_domain: FairnessDomain,
    pub topk: Vec<usize>,
}

impl RunManifest {
    pub fn path_for(checkpoint: &Path) -> std::path::PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".json");
        s.into()
    }
}
