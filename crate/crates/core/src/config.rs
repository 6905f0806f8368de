//! Flat `key=value` run configuration.
//!
//! Files are UTF-8, one assignment per line, `#` starts a comment. Command
//! line overrides are applied after the file and win. Unknown keys and
//! unparsable values are errors that name the key.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{default_shifts, PhantomParams, SiteShift, DESK_SITES};
use crate::federated::{FedConfig, Toggles};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Structure};

/// Grid used by the hyperparameter sweep.
pub const DEFAULT_GRID: [f64; 5] = [1e-4, 1e-2, 1.0, 1e2, 1e4];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("key `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

/// Where client updates travel during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Memory,
    Spool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub toggles: Toggles,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub structure: Structure,
    pub windows_per_subject: usize,
    pub target_batch: usize,
    pub term_grads: bool,
    /// subjects per site
    pub sites: Vec<usize>,
    pub shifts: Vec<SiteShift>,
    /// site id, or `smallest`
    pub target_site: String,
    /// gates per generated subject
    pub subject_gates: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    /// existing dataset (directory or manifest); generated in memory when unset
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub transport: TransportKind,
    pub sweep_alphas: Vec<f64>,
    pub sweep_betas: Vec<f64>,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fed = FedConfig::default();
        Self {
            model: fed.model,
            loss: fed.loss,
            toggles: fed.toggles,
            rounds: fed.rounds,
            local_epochs: fed.local_epochs,
            batch: fed.batch,
            lr: fed.lr,
            seed: fed.seed,
            structure: fed.structure,
            windows_per_subject: fed.windows_per_subject,
            target_batch: fed.target_batch,
            term_grads: fed.term_grads,
            sites: DESK_SITES.to_vec(),
            shifts: default_shifts(),
            target_site: "smallest".into(),
            subject_gates: 8,
            amplitude: 0.25,
            noise_std: 0.05,
            data: None,
            out: PathBuf::from("out"),
            transport: TransportKind::Memory,
            sweep_alphas: DEFAULT_GRID.to_vec(),
            sweep_betas: DEFAULT_GRID.to_vec(),
            folds: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "volume_side" => self.model.volume_side = parse(key, v)?,
            "patch_side" => self.model.patch_side = parse(key, v)?,
            "gates" => self.model.gates = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "blocks" => self.model.blocks = parse(key, v)?,
            "alpha_att" => self.loss.alpha_att = parse(key, v)?,
            "beta_lmmd" => self.loss.beta_lmmd = parse(key, v)?,
            "time_att" => self.toggles.time_att = parse(key, v)?,
            "spatial_att" => self.toggles.spatial_att = parse(key, v)?,
            "lmmd" => self.toggles.lmmd = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "local_epochs" => self.local_epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "structure" => self.structure = parse(key, v)?,
            "windows_per_subject" => self.windows_per_subject = parse(key, v)?,
            "target_batch" => self.target_batch = parse(key, v)?,
            "term_grads" => self.term_grads = parse(key, v)?,
            "sites" => {
                self.sites = parse_list(key, v)?;
                self.shifts.resize(self.sites.len(), SiteShift::default());
            }
            "target_site" => self.target_site = v.to_string(),
            "subject_gates" => self.subject_gates = parse(key, v)?,
            "amplitude" => self.amplitude = parse(key, v)?,
            "noise_std" => self.noise_std = parse(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "transport" => {
                self.transport = match v {
                    "memory" => TransportKind::Memory,
                    "spool" => TransportKind::Spool,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: v.into(),
                            msg: "expected `memory` or `spool`".into(),
                        })
                    }
                }
            }
            "sweep_alphas" => self.sweep_alphas = parse_list(key, v)?,
            "sweep_betas" => self.sweep_betas = parse_list(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            _ => return self.set_shift(key, v),
        }
        Ok(())
    }

    /// `site.<i>.{gain,offset,blur,noise}`
    fn set_shift(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let parts: Vec<&str> = key.split('.').collect();
        let ["site", idx, field] = parts[..] else {
            return Err(ConfigError::UnknownKey(key.into()));
        };
        let i: usize = idx.parse().map_err(|_| ConfigError::UnknownKey(key.into()))?;
        if i >= self.shifts.len() {
            self.shifts.resize(i + 1, SiteShift::default());
        }
        let s = &mut self.shifts[i];
        match field {
            "gain" => s.gain = parse(key, v)?,
            "offset" => s.offset = parse(key, v)?,
            "blur" => s.blur = parse(key, v)?,
            "noise" => s.noise = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| Err(ConfigError::Invalid { key: key.into(), msg });
        let m = &self.model;
        for (key, v) in [
            ("volume_side", m.volume_side),
            ("patch_side", m.patch_side),
            ("gates", m.gates),
            ("d_model", m.d_model),
            ("heads", m.heads),
            ("blocks", m.blocks),
            ("batch", self.batch),
            ("target_batch", self.target_batch),
            ("subject_gates", self.subject_gates),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !m.volume_side.is_multiple_of(m.patch_side) {
            return bad("patch_side", format!("does not divide volume_side {}", m.volume_side));
        }
        if !m.d_model.is_multiple_of(m.heads) {
            return bad("heads", format!("does not divide d_model {}", m.d_model));
        }
        for (key, v) in [("alpha_att", self.loss.alpha_att), ("beta_lmmd", self.loss.beta_lmmd)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("{v} must be finite and non-negative"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.amplitude) {
            return bad("amplitude", format!("{} outside [0, 1)", self.amplitude));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std", format!("{} must be non-negative", self.noise_std));
        }
        if self.data.is_none() {
            if self.sites.len() < 2 {
                return bad("sites", "need at least two sites (sources and a target)".into());
            }
            if self.sites.contains(&0) {
                return bad("sites", "every site needs at least one subject".into());
            }
            if self.shifts.len() != self.sites.len() {
                return bad(
                    "sites",
                    format!("{} sites but shifts for {}", self.sites.len(), self.shifts.len()),
                );
            }
            for (i, s) in self.shifts.iter().enumerate() {
                if s.validate().is_err() {
                    return bad(
                        &format!("site.{i}.gain"),
                        "shift must have gain > 0 and finite values".into(),
                    );
                }
            }
            if self.target_site != "smallest"
                && !(0..self.sites.len()).any(|i| crate::data::site_id(i) == self.target_site)
            {
                return bad("target_site", format!("no site `{}`", self.target_site));
            }
        }
        if self.folds < 2 {
            return bad("folds", "need at least 2".into());
        }
        for (key, grid) in [("sweep_alphas", &self.sweep_alphas), ("sweep_betas", &self.sweep_betas)] {
            if grid.is_empty() || grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(key, "needs non-negative finite values".into());
            }
        }
        Ok(())
    }

    pub fn fed(&self) -> FedConfig {
        FedConfig {
            model: self.model,
            loss: self.loss,
            toggles: self.toggles,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            structure: self.structure,
            windows_per_subject: self.windows_per_subject,
            target_batch: self.target_batch,
            term_grads: self.term_grads,
        }
    }

    pub fn phantom(&self) -> PhantomParams {
        PhantomParams {
            gates: self.subject_gates,
            amplitude: self.amplitude,
            noise_std: self.noise_std,
            ..PhantomParams::for_side(self.model.volume_side)
        }
    }

    /// Resolves `smallest` to the id of the site with fewest subjects
    /// (first on ties).
    pub fn resolve_target(&self, site_sizes: &[(String, usize)]) -> Result<String, ConfigError> {
        if self.target_site == "smallest" {
            let mut best: Option<&(String, usize)> = None;
            for s in site_sizes {
                if best.is_none_or(|b| s.1 < b.1) {
                    best = Some(s);
                }
            }
            return best.map(|b| b.0.clone()).ok_or_else(|| ConfigError::Invalid {
                key: "target_site".into(),
                msg: "no sites".into(),
            });
        }
        if site_sizes.iter().any(|s| s.0 == self.target_site) {
            Ok(self.target_site.clone())
        } else {
            Err(ConfigError::Invalid {
                key: "target_site".into(),
                msg: format!("no site `{}`", self.target_site),
            })
        }
    }
}

/// Parses config text into assignments.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the file (if any), then `overrides`; validated.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
            path: p.display().to_string(),
            msg: e.to_string(),
        })?,
        None => String::new(),
    };
    config_from_text(&text, overrides)
}

/// Same as [`load_config`] for config text already in memory.
pub fn config_from_text(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (k, v) in parse_assignments(text)? {
        cfg.set(&k, &v)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
