//! The operations behind each command: data generation, training,
//! evaluation, sweeps, ablations, fold plans, and the gradient suite.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check_sampled, AttentionLayout, GradCheckError, Tape, Tensor, TensorError, Var};
use crate::config::{ConfigError, RunConfig, TransportKind};
use crate::data::{build_sites, kfold_split, load_dataset, save_dataset, DataError, FoldPlan, SiteDataset};
use crate::federated::{
    round_log_csv, run_federated_training, timings_csv, FedConfig, FedError, InMemory, RoundLog, SpoolDir, Toggles,
};
use crate::losses::{
    attention_consistency_on_tape, class_weights, dice_loss, lmmd_on_tape, KernelSpec, LossError, LossWeights,
};
use crate::metrics::{metrics_report, MetricCase, MetricsError, MetricsReport, Summary};
use crate::model::{
    expected_shapes, forward, forward_on_tape, init_weights, BoundWeights, GatedVolumeSequence, ModelConfig,
    ModelError, WeightSet,
};

pub const WEIGHTS_FILE: &str = "weights.fdwt";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const FOLDS_FILE: &str = "folds.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::model::WeightFormatError> for ExperimentError {
    fn from(e: crate::model::WeightFormatError) -> Self {
        ExperimentError::Invalid(format!("weights: {e}"))
    }
}

fn io(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io(path, e))
}

pub fn read_weights(path: &Path) -> Result<WeightSet, ExperimentError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(WeightSet::from_bytes(&bytes)?)
}

/// Loads `cfg.data` or generates the configured sites in memory.
pub fn prepare_sites(cfg: &RunConfig) -> Result<Vec<SiteDataset>, ExperimentError> {
    match &cfg.data {
        Some(p) => Ok(load_dataset(p)?),
        None => Ok(build_sites(&cfg.sites, &cfg.shifts, &cfg.phantom(), cfg.seed)?),
    }
}

pub fn site_sizes(sites: &[SiteDataset]) -> Vec<(String, usize)> {
    sites.iter().map(|s| (s.id.clone(), s.subjects.len())).collect()
}

pub fn resolve_target(cfg: &RunConfig, sites: &[SiteDataset]) -> Result<String, ExperimentError> {
    Ok(cfg.resolve_target(&site_sizes(sites))?)
}

// ── generate ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub manifest: PathBuf,
    pub sites: Vec<(String, usize)>,
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<GenerateSummary, ExperimentError> {
    let sites = build_sites(&cfg.sites, &cfg.shifts, &cfg.phantom(), cfg.seed)?;
    let manifest = save_dataset(out, &sites)?;
    Ok(GenerateSummary {
        manifest,
        sites: site_sizes(&sites),
    })
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub target: String,
    pub init_checksum: String,
    pub weights: WeightSet,
    pub logs: Vec<RoundLog>,
}

impl TrainOutcome {
    pub fn checksum(&self) -> String {
        self.weights.checksum()
    }
}

fn run_with(
    cfg: &RunConfig,
    fed: &FedConfig,
    sites: &[SiteDataset],
    target: &str,
) -> Result<crate::federated::FedRun, ExperimentError> {
    Ok(match cfg.transport {
        TransportKind::Memory => run_federated_training(sites, target, fed, &mut InMemory::default())?,
        TransportKind::Spool => {
            let mut t = SpoolDir::new(cfg.out.join("spool"))?;
            run_federated_training(sites, target, fed, &mut t)?
        }
    })
}

/// Federated training with the configured target; writes weights and logs
/// to `out` when given.
pub fn train(cfg: &RunConfig, sites: &[SiteDataset], out: Option<&Path>) -> Result<TrainOutcome, ExperimentError> {
    train_with(cfg, &cfg.fed(), sites, out)
}

pub fn train_with(
    cfg: &RunConfig,
    fed: &FedConfig,
    sites: &[SiteDataset],
    out: Option<&Path>,
) -> Result<TrainOutcome, ExperimentError> {
    let target = resolve_target(cfg, sites)?;
    let init_checksum = init_weights(&fed.model, fed.seed).checksum();
    let run = run_with(cfg, fed, sites, &target)?;
    if let Some(dir) = out {
        write_file(&dir.join(WEIGHTS_FILE), run.weights.to_bytes()?)?;
        write_file(&dir.join(ROUNDS_FILE), round_log_csv(&run.logs))?;
        write_file(&dir.join(TIMINGS_FILE), timings_csv(&run.logs))?;
    }
    Ok(TrainOutcome {
        target,
        init_checksum,
        weights: run.weights,
        logs: run.logs,
    })
}

/// Pools every labeled non-target site into one client: the centralized
/// reference for the same data.
pub fn pooled_sources(sites: &[SiteDataset], target: &str) -> Vec<SiteDataset> {
    let pooled = SiteDataset {
        id: "pooled".into(),
        subjects: sites
            .iter()
            .filter(|s| s.id != target)
            .flat_map(|s| s.subjects.clone())
            .collect(),
        labeled: true,
    };
    let t = sites.iter().filter(|s| s.id == target).cloned();
    std::iter::once(pooled).chain(t).collect()
}

// ── evaluate ────────────────────────────────────────────────────────

/// Metrics for every (subject, start gate) window of `site`, scoring the
/// prediction against the window's first-gate mask.
pub fn evaluate_site(
    weights: &WeightSet,
    site: &SiteDataset,
    model: &ModelConfig,
    structure: crate::model::Structure,
) -> Result<Vec<MetricCase>, ExperimentError> {
    let mut cases = Vec::new();
    for s in &site.subjects {
        for g in 0..s.sequence.gate_count() {
            let gt = s
                .sequence
                .mask(structure, g)
                .ok_or_else(|| ExperimentError::Invalid(format!("subject {} has no {structure} masks", s.id)))?;
            let pred = forward(&s.sequence.window(g, model.gates), weights, model)?.binary_mask();
            cases.push(MetricCase::compute(&s.id, g, structure, &pred, gt)?);
        }
    }
    Ok(cases)
}

pub fn evaluate(
    weights: &WeightSet,
    sites: &[SiteDataset],
    site_id: &str,
    cfg: &RunConfig,
) -> Result<(MetricsReport, String), ExperimentError> {
    let site = sites
        .iter()
        .find(|s| s.id == site_id)
        .ok_or_else(|| ExperimentError::Invalid(format!("no site `{site_id}`")))?;
    Ok(metrics_report(evaluate_site(weights, site, &cfg.model, cfg.structure)?))
}

fn mean_of(
    report: &MetricsReport,
    cfg: &RunConfig,
    pick: fn(&crate::metrics::StructureSummary) -> Option<Summary>,
) -> f64 {
    report
        .summary(cfg.structure)
        .and_then(pick)
        .map_or(f64::NAN, |s| s.mean)
}

/// Mean metrics of one trained configuration on the target site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub dsc: f64,
    pub dsc_std: f64,
    pub hd: f64,
    pub asd: f64,
    pub sn: f64,
    pub sp: f64,
}

fn score(report: &MetricsReport, cfg: &RunConfig) -> TargetScore {
    TargetScore {
        dsc: mean_of(report, cfg, |s| s.dsc),
        dsc_std: report
            .summary(cfg.structure)
            .and_then(|s| s.dsc)
            .map_or(f64::NAN, |s| s.std),
        hd: mean_of(report, cfg, |s| s.hd),
        asd: mean_of(report, cfg, |s| s.asd),
        sn: mean_of(report, cfg, |s| s.sn),
        sp: mean_of(report, cfg, |s| s.sp),
    }
}

/// Trains with `fed` and scores the target site.
pub fn train_and_score(
    cfg: &RunConfig,
    fed: &FedConfig,
    sites: &[SiteDataset],
) -> Result<(TrainOutcome, TargetScore), ExperimentError> {
    let outcome = train_with(cfg, fed, sites, None)?;
    let cfg_eval = RunConfig {
        model: fed.model,
        structure: fed.structure,
        ..cfg.clone()
    };
    let (report, _) = evaluate(&outcome.weights, sites, &outcome.target, &cfg_eval)?;
    Ok((outcome, score(&report, &cfg_eval)))
}

// ── sweep and ablation ──────────────────────────────────────────────

pub const SWEEP_HEADER: &str = "alpha_att,beta_lmmd,dsc,dsc_std,hd,asd,sn,sp,checksum";

fn fmt_score(s: &TargetScore) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        s.dsc, s.dsc_std, s.hd, s.asd, s.sn, s.sp
    )
}

/// One training run per (alpha, beta) cell; each row is flushed to
/// `out/sweep.csv` as soon as its cell finishes.
pub fn sweep(
    cfg: &RunConfig,
    sites: &[SiteDataset],
    out: &Path,
) -> Result<Vec<(LossWeights, TargetScore)>, ExperimentError> {
    let path = out.join(SWEEP_FILE);
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut file = File::create(&path).map_err(|e| io(&path, e))?;
    writeln!(file, "{SWEEP_HEADER}").map_err(|e| io(&path, e))?;
    let mut rows = Vec::new();
    for &alpha_att in &cfg.sweep_alphas {
        for &beta_lmmd in &cfg.sweep_betas {
            let w = LossWeights { alpha_att, beta_lmmd };
            let fed = FedConfig { loss: w, ..cfg.fed() };
            let (outcome, s) = train_and_score(cfg, &fed, sites)?;
            writeln!(file, "{alpha_att},{beta_lmmd},{},{}", fmt_score(&s), outcome.checksum())
                .map_err(|e| io(&path, e))?;
            file.flush().map_err(|e| io(&path, e))?;
            tracing::info!(alpha_att, beta_lmmd, dsc = s.dsc, "sweep cell done");
            rows.push((w, s));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub score: TargetScore,
    /// largest per-term gradient norm seen over all rounds and clients
    pub max_grad_dice: f64,
    pub max_grad_att: f64,
    pub max_grad_lmmd: f64,
}

impl AblationRow {
    /// Names of the loss terms with a nonzero gradient.
    pub fn contributing(&self) -> Vec<&'static str> {
        [
            ("dice", self.max_grad_dice),
            ("att", self.max_grad_att),
            ("lmmd", self.max_grad_lmmd),
        ]
        .into_iter()
        .filter(|(_, g)| *g > 0.0)
        .map(|(n, _)| n)
        .collect()
    }
}

pub const ABLATION_HEADER: &str =
    "time_att,spatial_att,lmmd,dsc,dsc_std,hd,asd,sn,sp,grad_dice,grad_att,grad_lmmd,contributing";

/// All eight toggle combinations, with per-term gradient logging on.
pub fn ablate(cfg: &RunConfig, sites: &[SiteDataset], out: &Path) -> Result<Vec<AblationRow>, ExperimentError> {
    let path = out.join(ABLATION_FILE);
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut file = File::create(&path).map_err(|e| io(&path, e))?;
    writeln!(file, "{ABLATION_HEADER}").map_err(|e| io(&path, e))?;
    let mut rows = Vec::new();
    for toggles in Toggles::all() {
        let fed = FedConfig {
            toggles,
            term_grads: true,
            ..cfg.fed()
        };
        let (outcome, s) = train_and_score(cfg, &fed, sites)?;
        let max = |f: fn(&crate::federated::TermGrads) -> f64| {
            outcome
                .logs
                .iter()
                .flat_map(|r| r.clients.iter())
                .filter_map(|c| c.term_grads.as_ref().map(f))
                .fold(0.0, f64::max)
        };
        let row = AblationRow {
            toggles,
            score: s,
            max_grad_dice: max(|g| g.dice),
            max_grad_att: max(|g| g.att),
            max_grad_lmmd: max(|g| g.lmmd),
        };
        writeln!(
            file,
            "{},{},{},{},{:.6e},{:.6e},{:.6e},{}",
            toggles.time_att,
            toggles.spatial_att,
            toggles.lmmd,
            fmt_score(&s),
            row.max_grad_dice,
            row.max_grad_att,
            row.max_grad_lmmd,
            row.contributing().join("+")
        )
        .map_err(|e| io(&path, e))?;
        file.flush().map_err(|e| io(&path, e))?;
        rows.push(row);
    }
    Ok(rows)
}

// ── folds ───────────────────────────────────────────────────────────

pub fn folds(cfg: &RunConfig, sites: &[SiteDataset]) -> Result<(FoldPlan, String), ExperimentError> {
    let subjects: Vec<(String, String)> = sites
        .iter()
        .flat_map(|s| s.subjects.iter().map(|x| (s.id.clone(), x.id.clone())))
        .collect();
    let plan = kfold_split(&subjects, cfg.folds, cfg.seed)?;
    let site_of: BTreeMap<&str, &str> = subjects.iter().map(|(s, x)| (x.as_str(), s.as_str())).collect();
    let mut csv = String::from("fold,subject,site\n");
    for (f, ids) in plan.folds.iter().enumerate() {
        for id in ids {
            csv.push_str(&format!("{f},{id},{}\n", site_of[id.as_str()]));
        }
    }
    Ok((plan, csv))
}

// ── gradient suite ──────────────────────────────────────────────────

/// Result of one gradient check across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl GradRow {
    pub fn pass(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-6;

type Case = (
    &'static str,
    Vec<Vec<usize>>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>,
);

/// Fixed random projection to a scalar: `Σ y ∘ R`.
fn probe(tape: &mut Tape, y: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = tape.constant(Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)));
    let m = tape.mul(y, r)?;
    Ok(tape.sum(m))
}

fn loss_err(e: LossError) -> TensorError {
    TensorError::Invalid {
        op: "loss",
        msg: e.to_string(),
    }
}

/// Small layout shared by the attention cases: 2 heads, 4 patches, 2 gates.
pub const CHECK_LAYOUT: AttentionLayout = AttentionLayout {
    heads: 2,
    patches: 4,
    gates: 2,
    d_model: 4,
};

/// Configuration of the end-to-end model check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        volume_side: 8,
        patch_side: 4,
        gates: 2,
        d_model: 8,
        heads: 2,
        blocks: 2,
    }
}

fn primitive_cases() -> Vec<Case> {
    let l = CHECK_LAYOUT;
    let tok = l.tokens();
    let lay = move || l;
    vec![
        (
            "add",
            vec![vec![3, 4], vec![3, 1]],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            "sub",
            vec![vec![3, 4], vec![1]],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            "div",
            vec![vec![3, 4], vec![3, 1]],
            Box::new(|t, v| {
                let d = t.add_scalar(v[1], 2.5);
                let y = t.div(v[0], d)?;
                probe(t, y)
            }),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                probe(t, y)
            }),
        ),
        (
            "add_scalar",
            vec![vec![5]],
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], 0.3);
                probe(t, y)
            }),
        ),
        (
            "abs",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.abs(v[0]);
                probe(t, y)
            }),
        ),
        (
            "relu",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                probe(t, y)
            }),
        ),
        (
            "gelu",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.gelu(v[0]);
                probe(t, y)
            }),
        ),
        (
            "sigmoid",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                probe(t, y)
            }),
        ),
        (
            "sum",
            vec![vec![2, 3]],
            Box::new(|t, v| {
                let s = t.sum(v[0]);
                let s2 = t.mul(s, s)?;
                Ok(s2)
            }),
        ),
        (
            "mean",
            vec![vec![2, 3]],
            Box::new(|t, v| {
                let s = t.mean(v[0])?;
                let s2 = t.mul(s, s)?;
                Ok(s2)
            }),
        ),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            "matmul_t",
            vec![vec![3, 4], vec![2, 4]],
            Box::new(|t, v| {
                let y = t.matmul_t(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            "transpose",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                probe(t, y)
            }),
        ),
        (
            "reshape",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[2, 6])?;
                probe(t, y)
            }),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                probe(t, y)
            }),
        ),
        (
            "slice",
            vec![vec![4, 3]],
            Box::new(|t, v| {
                let y = t.slice(v[0], 0, 1, 2)?;
                probe(t, y)
            }),
        ),
        (
            "add_bias",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            "softmax_rows",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 1)?;
                probe(t, y)
            }),
        ),
        (
            "softmax_cols",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 0)?;
                probe(t, y)
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe(t, y)
            }),
        ),
        (
            "temporal_attention",
            vec![vec![tok, 4], vec![tok, 4]],
            Box::new(move |t, v| {
                let y = t.temporal_attention(v[0], v[1], lay())?;
                probe(t, y)
            }),
        ),
        (
            "spatial_attention",
            vec![vec![tok, 4], vec![tok, 4]],
            Box::new(move |t, v| {
                let y = t.spatial_attention(v[0], v[1], lay())?;
                probe(t, y)
            }),
        ),
        (
            "cls_attention",
            vec![vec![tok, 4], vec![tok, 4]],
            Box::new(move |t, v| {
                let y = t.cls_attention(v[0], v[1], lay())?;
                probe(t, y)
            }),
        ),
        (
            "divided_aggregate",
            vec![vec![tok, 4], vec![tok, 4], vec![tok, 4]],
            Box::new(move |t, v| {
                let ta = t.temporal_attention(v[0], v[1], lay())?;
                let sa = t.spatial_attention(v[0], v[1], lay())?;
                let ca = t.cls_attention(v[0], v[1], lay())?;
                let y = t.divided_aggregate(ta, sa, ca, v[2], lay())?;
                probe(t, y)
            }),
        ),
        (
            "gaussian_kernel",
            vec![vec![3, 2], vec![4, 2]],
            Box::new(|t, v| {
                let y = t.gaussian_kernel(v[0], v[1], &[0.5, 2.0])?;
                probe(t, y)
            }),
        ),
        (
            "dice_loss",
            vec![vec![2, 2, 2]],
            Box::new(|t, v| {
                let p = t.sigmoid(v[0]);
                dice_loss(t, p, &[1, 0, 1, 1, 0, 0, 1, 0]).map_err(loss_err)
            }),
        ),
        (
            "attention_consistency",
            vec![vec![2, 4, 2, 3], vec![2, 2, 4, 5], vec![2, 4, 2, 3], vec![2, 2, 4, 5]],
            Box::new(|t, v| {
                let target = crate::model::AttentionMaps {
                    temporal: Tensor::from_fn([2, 4, 2, 3], |i| ((i * 7) % 11) as f64 * 0.3 - 1.5),
                    spatial: Tensor::from_fn([2, 2, 4, 5], |i| ((i * 5) % 13) as f64 * 0.25 - 1.6),
                };
                Ok(attention_consistency_on_tape(t, &[v[0], v[2]], &[v[1], v[3]], &target)
                    .map_err(loss_err)?
                    .total)
            }),
        ),
        (
            "lmmd",
            vec![vec![4, 3], vec![5, 3]],
            Box::new(|t, v| {
                let ws =
                    class_weights(&Tensor::new([4, 2], vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 1.0, 0.0]).expect("shape"))
                        .map_err(loss_err)?;
                let wt = class_weights(&Tensor::from_fn([5, 2], |i| {
                    if i % 2 == 0 {
                        0.1 + 0.15 * (i / 2) as f64
                    } else {
                        0.9 - 0.15 * (i / 2) as f64
                    }
                }))
                .map_err(loss_err)?;
                lmmd_on_tape(t, v[0], &ws, v[1], &wt, &KernelSpec::Fixed(vec![0.5, 1.0, 4.0])).map_err(loss_err)
            }),
        ),
    ]
}

/// Inputs of a case: uniform in (−1, 1), pushed away from zero so the
/// kinks of `abs` and `relu` are never straddled.
fn case_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            Tensor::from_fn(s.clone(), |_| {
                let u: f64 = rng.random_range(-1.0..1.0);
                u.signum() * (0.1 + 0.9 * u.abs())
            })
        })
        .collect()
}

/// Checks every primitive over `seeds`.
pub fn gradcheck_primitives(seeds: &[u64]) -> Result<Vec<GradRow>, ExperimentError> {
    let mut rows = Vec::new();
    for (name, shapes, f) in primitive_cases() {
        let mut row = GradRow {
            op: name.to_string(),
            max_rel_error: 0.0,
            tolerance: PRIMITIVE_TOLERANCE,
            coords: 0,
        };
        for &seed in seeds {
            let r = grad_check_sampled(&f, &case_inputs(&shapes, seed), FD_EPS, usize::MAX)?;
            row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
            row.coords += r.coords_checked;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// End-to-end check of the small model with respect to every weight array,
/// probing at most `per_array` coordinates of each.
pub fn gradcheck_model(seeds: &[u64], per_array: usize) -> Result<GradRow, ExperimentError> {
    let cfg = gradcheck_model_config();
    let names: Vec<String> = expected_shapes(&cfg).into_keys().collect();
    let mut row = GradRow {
        op: "model_end_to_end".into(),
        max_rel_error: 0.0,
        tolerance: MODEL_TOLERANCE,
        coords: 0,
    };
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
        let mut w = init_weights(&cfg, seed);
        // randomize the zero-initialized arrays so every path carries signal
        for (name, t) in w.as_map_mut().iter_mut() {
            if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
                let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = base + rng.random_range(-0.3..0.3));
            }
        }
        let voxels = cfg.voxels();
        let gates: Vec<Vec<f32>> = (0..cfg.gates)
            .map(|_| (0..voxels).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let x = GatedVolumeSequence::new(cfg.volume_side, gates, None, None).map_err(ModelError::from)?;
        let inputs: Vec<Tensor> = names.iter().map(|n| w.get(n).expect("schema").clone()).collect();
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
            let map = names.iter().cloned().zip(vars.iter().copied()).collect();
            let bound = BoundWeights::from_vars(map);
            let out = forward_on_tape(tape, &x, &bound, &cfg).map_err(|e| TensorError::Invalid {
                op: "model",
                msg: e.to_string(),
            })?;
            let a = probe(tape, out.prob)?;
            let b = probe(tape, out.features)?;
            tape.add(a, b)
        };
        let r = grad_check_sampled(f, &inputs, FD_EPS, per_array)?;
        row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
        row.coords += r.coords_checked;
    }
    Ok(row)
}

/// Primitives plus the end-to-end model.
pub fn gradcheck_suite(seeds: &[u64], per_array: usize) -> Result<Vec<GradRow>, ExperimentError> {
    let mut rows = gradcheck_primitives(seeds)?;
    rows.push(gradcheck_model(seeds, per_array)?);
    Ok(rows)
}

pub fn gradcheck_csv(rows: &[GradRow]) -> String {
    let mut s = String::from("op,max_rel_error,tolerance,coords,pass\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.3e},{:.0e},{},{}\n",
            r.op,
            r.max_rel_error,
            r.tolerance,
            r.coords,
            r.pass()
        ));
    }
    s
}
