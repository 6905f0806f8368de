//! Federated averaging with a target-statistics relay.
//!
//! Each round the server broadcasts the global weights, the unlabeled target
//! site publishes derived statistics, every labeled source site trains
//! locally, and the server averages the returned weights by sample count.
//! Voxels never leave a site.

mod client;
mod transport;
mod wire;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, OptimizerError, OptimizerState, Tensor, TensorError};
use crate::data::SiteDataset;
use crate::losses::{LossError, LossWeights};
use crate::model::{init_weights, ModelConfig, ModelError, Structure, WeightFormatError, WeightSet};

pub use client::{
    client_local_train, target_publish_stats, token_soft_labels, train_step, ClientLog, StepLosses, TermGrads,
};
pub use transport::{spool_path, InMemory, SpoolDir, Transport};
pub use wire::{deserialize_update, serialize_update, ClientUpdate, TargetStats, STATS_HEADER_LEN, UPDATE_HEADER_LEN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FedError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("update has no weight arrays")]
    EmptyWeights,
    #[error("schema mismatch at `{name}`: {detail}")]
    Schema { name: String, detail: String },
    #[error("schema hash mismatch: header {header:#018x}, payload {actual:#018x}")]
    HashMismatch { header: u64, actual: u64 },
    #[error("bad payload: {0}")]
    Format(WeightFormatError),
    #[error("sample counts sum to zero")]
    ZeroSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("{0}")]
    NonFinite(String),
    #[error("client {client}, round {round}, step {step}: {component} loss is {value}")]
    NonFiniteLoss {
        client: String,
        round: u32,
        step: usize,
        component: &'static str,
        value: f64,
    },
    #[error("site {0} is unlabeled")]
    Unlabeled(String),
    #[error("target site {0} has no windows")]
    EmptyTarget(String),
    #[error("invalid federated setup: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Io(String),
    #[error("round {round}: every client failed")]
    AllClientsFailed { round: u32 },
}

impl From<TensorError> for FedError {
    fn from(e: TensorError) -> Self {
        FedError::Model(ModelError::Tensor(e))
    }
}

/// Which auxiliary loss terms take part (the ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub time_att: bool,
    pub spatial_att: bool,
    pub lmmd: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            time_att: true,
            spatial_att: true,
            lmmd: true,
        }
    }
}

impl Toggles {
    /// All eight on/off combinations, in binary order (time, spatial, lmmd).
    pub fn all() -> Vec<Toggles> {
        (0..8)
            .map(|i| Toggles {
                time_att: i & 4 != 0,
                spatial_att: i & 2 != 0,
                lmmd: i & 1 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let b = |v: bool| if v { "1" } else { "0" };
        format!("t{}s{}l{}", b(self.time_att), b(self.spatial_att), b(self.lmmd))
    }
}

/// Everything the training loop needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub toggles: Toggles,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub structure: Structure,
    /// windows drawn per subject each epoch; 0 uses every start gate
    pub windows_per_subject: usize,
    /// target windows behind each round's statistics
    pub target_batch: usize,
    /// record per-term gradient norms on each client's first step
    pub term_grads: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            toggles: Toggles::default(),
            rounds: 30,
            local_epochs: 1,
            batch: 4,
            lr: 1e-3,
            seed: 0,
            structure: Structure::Epi,
            windows_per_subject: 0,
            target_batch: 4,
            term_grads: false,
        }
    }
}

impl FedConfig {
    pub fn att_active(&self) -> bool {
        (self.toggles.time_att || self.toggles.spatial_att) && self.loss.alpha_att > 0.0
    }

    pub fn lmmd_active(&self) -> bool {
        self.toggles.lmmd && self.loss.beta_lmmd > 0.0
    }

    pub fn uses_target(&self) -> bool {
        self.att_active() || self.lmmd_active()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// `θ = Σ_i (S_i / S)·θ_i`, per named array.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<WeightSet, FedError> {
    let first = updates.first().ok_or(FedError::NoUpdates)?;
    if first.weights.is_empty() {
        return Err(FedError::EmptyWeights);
    }
    for u in &updates[1..] {
        let (a, b) = (first.weights.as_map(), u.weights.as_map());
        if let Some(name) = a
            .keys()
            .find(|k| !b.contains_key(*k))
            .or_else(|| b.keys().find(|k| !a.contains_key(*k)))
        {
            return Err(FedError::Schema {
                name: name.clone(),
                detail: "present in only some updates".into(),
            });
        }
        for (name, t) in a {
            if b[name].shape() != t.shape() {
                return Err(FedError::Schema {
                    name: name.clone(),
                    detail: format!("shape {:?} vs {:?}", t.shape(), b[name].shape()),
                });
            }
        }
    }
    let total: u64 = updates.iter().map(|u| u.sample_count as u64).sum();
    if total == 0 {
        return Err(FedError::ZeroSamples);
    }
    let coef: Vec<f64> = updates.iter().map(|u| u.sample_count as f64 / total as f64).collect();
    let mut out = WeightSet::new();
    for (name, t) in first.weights.iter() {
        let mut acc = vec![0.0; t.numel()];
        for (u, &c) in updates.iter().zip(&coef) {
            for (a, v) in acc.iter_mut().zip(u.weights.get(name).expect("checked").data()) {
                *a += c * v;
            }
        }
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// One round of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub clients: Vec<ClientLog>,
    /// checksum of the aggregated weights
    pub checksum: String,
    /// size of the published target statistics, 0 when none were needed
    pub stats_bytes: usize,
    pub wall_ms: u64,
}

impl RoundLog {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RoundLog) -> bool {
        RoundLog {
            wall_ms: 0,
            ..self.clone()
        } == RoundLog {
            wall_ms: 0,
            ..other.clone()
        }
    }
}

pub const ROUND_CSV_HEADER: &str =
    "round,client,samples,steps,dice,att,lmmd,total,grad_dice,grad_att,grad_lmmd,checksum,status";

/// Round log as CSV, one row per client. Wall time is left out so reruns
/// produce identical bytes; see [`timings_csv`].
pub fn round_log_csv(logs: &[RoundLog]) -> String {
    let mut s = String::from(ROUND_CSV_HEADER);
    s.push('\n');
    for r in logs {
        for c in &r.clients {
            let g = c.term_grads;
            let gf = |f: fn(&TermGrads) -> f64| g.as_ref().map(|g| format!("{:.6e}", f(g))).unwrap_or_default();
            let status = c
                .error
                .as_deref()
                .map_or("ok".to_string(), |e| format!("failed: {}", e.replace(',', ";")));
            s.push_str(&format!(
                "{},{},{},{},{:.8},{:.8},{:.8},{:.8},{},{},{},{},{}\n",
                r.round,
                c.client,
                c.samples,
                c.steps,
                c.losses.dice,
                c.losses.att,
                c.losses.lmmd,
                c.losses.total,
                gf(|g| g.dice),
                gf(|g| g.att),
                gf(|g| g.lmmd),
                r.checksum,
                status
            ));
        }
    }
    s
}

pub fn timings_csv(logs: &[RoundLog]) -> String {
    let mut s = String::from("round,wall_ms,stats_bytes\n");
    for r in logs {
        s.push_str(&format!("{},{},{}\n", r.round, r.wall_ms, r.stats_bytes));
    }
    s
}

/// Final weights and per-round logs.
#[derive(Debug, Clone, PartialEq)]
pub struct FedRun {
    pub weights: WeightSet,
    pub logs: Vec<RoundLog>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for a (stream, index...) position under `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Runs `cfg.rounds` synchronous rounds starting from seeded initial weights.
///
/// Clients run sequentially in site order; a client that fails is logged
/// and left out of that round's average.
pub fn run_federated_training(
    sites: &[SiteDataset],
    target_id: &str,
    cfg: &FedConfig,
    transport: &mut dyn Transport,
) -> Result<FedRun, FedError> {
    run_from(init_weights(&cfg.model, cfg.seed), sites, target_id, cfg, transport)
}

/// As [`run_federated_training`], from given initial weights.
pub fn run_from(
    initial: WeightSet,
    sites: &[SiteDataset],
    target_id: &str,
    cfg: &FedConfig,
    transport: &mut dyn Transport,
) -> Result<FedRun, FedError> {
    cfg.model.validate()?;
    cfg.loss.validate()?;
    let targets: Vec<&SiteDataset> = sites.iter().filter(|s| s.id == target_id).collect();
    if targets.len() != 1 {
        return Err(FedError::Config(format!(
            "expected exactly one target site `{target_id}`, found {}",
            targets.len()
        )));
    }
    let target = targets[0].unlabeled();
    let sources: Vec<&SiteDataset> = sites.iter().filter(|s| s.id != target_id).collect();
    if sources.is_empty() {
        return Err(FedError::Config("need at least one source site".into()));
    }
    let mut optimizers: Vec<OptimizerState> = sources.iter().map(|_| OptimizerState::new(cfg.adam())).collect();
    let mut global = initial;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let round = r as u32;
        let start = Instant::now();
        // statistics travel as bytes, exactly as they would between processes
        let (stats, stats_bytes) = if cfg.uses_target() {
            let s = target_publish_stats(
                &global,
                &target,
                &cfg.model,
                cfg.target_batch.min(target.window_count()),
                round,
                derive_seed(cfg.seed, &[2, r as u64]),
            )?;
            let bytes = s.to_bytes()?;
            (Some(TargetStats::from_bytes(&bytes)?), bytes.len())
        } else {
            (None, 0)
        };
        let mut client_logs = Vec::with_capacity(sources.len());
        for (i, (site, opt)) in sources.iter().zip(optimizers.iter_mut()).enumerate() {
            let seed = derive_seed(cfg.seed, &[1, r as u64, i as u64]);
            match client_local_train(&global, site, stats.as_ref(), cfg, opt, round, seed) {
                Ok((update, log)) => {
                    transport.send(round, &site.id, serialize_update(&update)?)?;
                    client_logs.push(log);
                }
                Err(e) => {
                    tracing::warn!(round, client = %site.id, error = %e, "client excluded from aggregation");
                    client_logs.push(ClientLog {
                        client: site.id.clone(),
                        samples: 0,
                        steps: 0,
                        losses: StepLosses::default(),
                        term_grads: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        let mut updates = Vec::new();
        for (client, payload) in transport.collect(round)? {
            let u = deserialize_update(&payload)?;
            if u.round != round {
                return Err(FedError::Config(format!(
                    "{client} sent round {} during round {round}",
                    u.round
                )));
            }
            updates.push(u);
        }
        if updates.is_empty() {
            return Err(FedError::AllClientsFailed { round });
        }
        global = fedavg_aggregate(&updates)?;
        let log = RoundLog {
            round,
            clients: client_logs,
            checksum: global.checksum(),
            stats_bytes,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        tracing::info!(
            round,
            checksum = %log.checksum,
            dice = log.clients.iter().map(|c| c.losses.dice).sum::<f64>() / log.clients.len() as f64,
            "round complete"
        );
        logs.push(log);
    }
    Ok(FedRun { weights: global, logs })
}
