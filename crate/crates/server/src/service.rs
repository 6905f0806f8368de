//! Blocking command implementations behind each endpoint.

use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use fedda_api::{
    AblateResponse, ErrorBody, ErrorKind, EvaluateResponse, FedavgRequest, FedavgResponse, FoldsResponse,
    GenerateResponse, GradcheckResponse, RunRequest, SweepCell, SweepResponse, TrainResponse,
};
use fedda_core::config::{config_from_text, ConfigError, RunConfig};
use fedda_core::experiments::{
    self, gradcheck_csv, gradcheck_suite, prepare_sites, read_weights, resolve_target, write_file, ExperimentError,
    ABLATION_FILE, FOLDS_FILE, GRADCHECK_FILE, METRICS_FILE, ROUNDS_FILE, SWEEP_FILE, TIMINGS_FILE, WEIGHTS_FILE,
};
use fedda_core::federated::{deserialize_update, fedavg_aggregate, FedError};

/// Seeds per gradient-check run, starting at the configured seed.
pub const GRADCHECK_SEEDS: u64 = 10;
/// Sampled coordinates per weight array in the model gradient check.
pub const GRADCHECK_PER_ARRAY: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }
}

impl From<Failure> for ErrorBody {
    fn from(f: Failure) -> Self {
        ErrorBody {
            kind: f.kind,
            message: f.message,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::usage(format!("config: {e}"))
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let kind = match e {
            ExperimentError::Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Runtime,
        };
        Failure {
            kind,
            message: e.to_string(),
        }
    }
}

fn config(req: &RunRequest) -> Result<RunConfig, Failure> {
    Ok(config_from_text(&req.config, &req.overrides)?)
}

pub fn generate(req: &RunRequest) -> Result<GenerateResponse, Failure> {
    let cfg = config(req)?;
    let s = experiments::generate(&cfg, &cfg.out)?;
    Ok(GenerateResponse {
        manifest: s.manifest,
        sites: s.sites,
    })
}

pub fn train(req: &RunRequest) -> Result<TrainResponse, Failure> {
    let cfg = config(req)?;
    let sites = prepare_sites(&cfg)?;
    let t = experiments::train(&cfg, &sites, Some(&cfg.out))?;
    Ok(TrainResponse {
        checksum: t.checksum(),
        target: t.target,
        init_checksum: t.init_checksum,
        rounds: t.logs.len(),
        files: [WEIGHTS_FILE, ROUNDS_FILE, TIMINGS_FILE]
            .iter()
            .map(|f| cfg.out.join(f))
            .collect(),
    })
}

pub fn evaluate(req: &RunRequest) -> Result<EvaluateResponse, Failure> {
    let cfg = config(req)?;
    let path = req.weights.clone().unwrap_or_else(|| cfg.out.join(WEIGHTS_FILE));
    let weights = read_weights(&path)?;
    let sites = prepare_sites(&cfg)?;
    let site = match &req.site {
        Some(s) => s.clone(),
        None => resolve_target(&cfg, &sites)?,
    };
    let (report, csv) = experiments::evaluate(&weights, &sites, &site, &cfg)?;
    let file = cfg.out.join(METRICS_FILE);
    write_file(&file, csv)?;
    Ok(EvaluateResponse { site, report, file })
}

pub fn gradcheck(req: &RunRequest) -> Result<GradcheckResponse, Failure> {
    let cfg = config(req)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + GRADCHECK_SEEDS).collect();
    let rows = gradcheck_suite(&seeds, GRADCHECK_PER_ARRAY)?;
    let file = cfg.out.join(GRADCHECK_FILE);
    write_file(&file, gradcheck_csv(&rows))?;
    Ok(GradcheckResponse {
        pass: rows.iter().all(|r| r.pass()),
        rows,
        file,
    })
}

pub fn sweep(req: &RunRequest) -> Result<SweepResponse, Failure> {
    let cfg = config(req)?;
    let sites = prepare_sites(&cfg)?;
    let cells = experiments::sweep(&cfg, &sites, &cfg.out)?
        .into_iter()
        .map(|(weights, score)| SweepCell { weights, score })
        .collect();
    Ok(SweepResponse {
        cells,
        file: cfg.out.join(SWEEP_FILE),
    })
}

pub fn ablate(req: &RunRequest) -> Result<AblateResponse, Failure> {
    let cfg = config(req)?;
    let sites = prepare_sites(&cfg)?;
    let rows = experiments::ablate(&cfg, &sites, &cfg.out)?;
    Ok(AblateResponse {
        rows,
        file: cfg.out.join(ABLATION_FILE),
    })
}

pub fn folds(req: &RunRequest) -> Result<FoldsResponse, Failure> {
    let cfg = config(req)?;
    let sites = prepare_sites(&cfg)?;
    let (plan, csv) = experiments::folds(&cfg, &sites)?;
    let file: PathBuf = cfg.out.join(FOLDS_FILE);
    write_file(&file, csv)?;
    Ok(FoldsResponse {
        folds: plan.folds,
        file,
    })
}

pub fn fedavg(req: &FedavgRequest) -> Result<FedavgResponse, Failure> {
    let updates = req
        .updates
        .iter()
        .enumerate()
        .map(|(i, b64)| {
            let bytes = STANDARD
                .decode(b64)
                .map_err(|e| Failure::usage(format!("update {i}: {e}")))?;
            deserialize_update(&bytes).map_err(|e| Failure::usage(format!("update {i}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let weights = fedavg_aggregate(&updates).map_err(|e| match e {
        FedError::NoUpdates => Failure::usage(e.to_string()),
        other => Failure {
            kind: ErrorKind::Runtime,
            message: other.to_string(),
        },
    })?;
    let bytes = weights.to_bytes().map_err(|e| Failure {
        kind: ErrorKind::Runtime,
        message: e.to_string(),
    })?;
    Ok(FedavgResponse {
        weights: STANDARD.encode(bytes),
        checksum: weights.checksum(),
    })
}
