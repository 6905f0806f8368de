//! JSON bodies exchanged between the service and its clients.
//!
//! Paths in requests and responses refer to the service's filesystem.

use std::path::PathBuf;

use fedda_core::experiments::{AblationRow, GradRow, TargetScore};
use fedda_core::losses::LossWeights;
use fedda_core::metrics::MetricsReport;
use serde::{Deserialize, Serialize};

pub const HEALTH: &str = "/health";
pub const GENERATE: &str = "/v1/generate";
pub const TRAIN: &str = "/v1/train";
pub const EVALUATE: &str = "/v1/evaluate";
pub const GRADCHECK: &str = "/v1/gradcheck";
pub const SWEEP: &str = "/v1/sweep";
pub const ABLATE: &str = "/v1/ablate";
pub const FOLDS: &str = "/v1/folds";
pub const FEDAVG: &str = "/v1/fedavg";

/// Every command takes a config file's text plus `key=value` overrides,
/// which win over the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    #[serde(default)]
    pub config: String,
    #[serde(default)]
    pub overrides: Vec<(String, String)>,
    /// evaluate: weights file; defaults to `<out>/weights.fdwt`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// evaluate: site to score; defaults to the configured target
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
}

impl RunRequest {
    pub fn new(config: impl Into<String>, overrides: Vec<(String, String)>) -> Self {
        RunRequest {
            config: config.into(),
            overrides,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// the request or config was rejected before any work started
    Usage,
    /// a module failed while running
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub manifest: PathBuf,
    pub sites: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub target: String,
    pub init_checksum: String,
    pub checksum: String,
    pub rounds: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub site: String,
    pub report: MetricsReport,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResponse {
    pub rows: Vec<GradRow>,
    pub pass: bool,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub weights: LossWeights,
    pub score: TargetScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub cells: Vec<SweepCell>,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateResponse {
    pub rows: Vec<AblationRow>,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldsResponse {
    pub folds: Vec<Vec<String>>,
    pub file: PathBuf,
}

/// Serialized client updates, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedavgRequest {
    pub updates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedavgResponse {
    /// FDWT weight file, base64 encoded
    pub weights: String,
    pub checksum: String,
}
