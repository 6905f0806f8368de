//! Site-side work: local optimization and target statistics.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, OptimizerState, Tape, Tensor, Var};
use crate::data::SiteDataset;
use crate::losses::{
    attention_consistency_on_tape, class_weights, dice_loss, lmmd_on_tape, total_on_tape, KernelSpec, LossError,
};
use crate::model::{
    forward, forward_on_tape, patch_means, AttentionMaps, BoundWeights, GatedVolumeSequence, ModelConfig, WeightSet,
};

use super::wire::{ClientUpdate, TargetStats};
use super::{FedConfig, FedError};

/// L2 norm of the parameter gradient contributed by each loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermGrads {
    pub dice: f64,
    pub att: f64,
    pub lmmd: f64,
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub dice: f64,
    pub att: f64,
    pub lmmd: f64,
    pub total: f64,
}

/// Per-client summary of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub client: String,
    pub samples: u32,
    pub steps: usize,
    /// means over the round's steps
    pub losses: StepLosses,
    /// measured on the round's first step when requested
    pub term_grads: Option<TermGrads>,
    /// set when the client failed and was left out of aggregation
    pub error: Option<String>,
}

/// `[f, 1 − f]` per patch token, where `f` is the patch mean of `field`.
/// Every gate of a patch position shares the value of the predicted gate.
pub fn token_soft_labels(field: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let frac = patch_means(field, cfg);
    let mut out = Vec::with_capacity(2 * frac.len() * cfg.gates);
    for _ in 0..cfg.gates {
        for &f in &frac {
            let f = f.clamp(0.0, 1.0);
            out.extend([f, 1.0 - f]);
        }
    }
    out
}

fn grad_norm(g: &Gradients) -> f64 {
    g.named()
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn mean_var(tape: &mut Tape, vars: &[Var]) -> Result<Var, FedError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// One Adam step of the combined objective on `batch`, whose first-gate
/// masks are the targets. Returns the loss values and, if
/// `cfg.term_grads`, per-term gradient norms.
pub fn train_step(
    weights: &mut WeightSet,
    batch: &[GatedVolumeSequence],
    stats: Option<&TargetStats>,
    cfg: &FedConfig,
    opt: &mut OptimizerState,
) -> Result<(StepLosses, Option<TermGrads>), FedError> {
    if batch.is_empty() {
        return Err(FedError::Config("empty training batch".into()));
    }
    let m = &cfg.model;
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, m, true)?;
    let (mut dice_terms, mut temporal, mut spatial, mut feats) = (vec![], vec![], vec![], vec![]);
    let mut labels = Vec::new();
    for x in batch {
        let mask = x.mask(cfg.structure, 0).ok_or(FedError::Unlabeled("batch".into()))?;
        let out = forward_on_tape(&mut tape, x, &bound, m)?;
        dice_terms.push(dice_loss(&mut tape, out.prob, mask)?);
        temporal.push(out.maps.temporal);
        spatial.push(out.maps.spatial);
        feats.push(out.features);
        if cfg.lmmd_active() {
            let field: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
            labels.extend(token_soft_labels(&field, m));
        }
    }
    let dice = mean_var(&mut tape, &dice_terms)?;

    let needs_stats = cfg.att_active() || cfg.lmmd_active();
    let stats = match (needs_stats, stats) {
        (true, None) => {
            return Err(FedError::Config(
                "domain-adaptation terms enabled but no target stats".into(),
            ))
        }
        (_, s) => s,
    };
    let att = match stats.filter(|_| cfg.att_active()) {
        Some(s) => {
            let a = attention_consistency_on_tape(&mut tape, &temporal, &spatial, &s.maps)?;
            Some(match (cfg.toggles.time_att, cfg.toggles.spatial_att) {
                (true, true) => a.total,
                (true, false) => a.time,
                _ => a.space,
            })
        }
        None => None,
    };
    let lmmd = match stats.filter(|_| cfg.lmmd_active()) {
        Some(s) => {
            let zs = tape.concat(&feats, 0)?;
            let n = labels.len() / 2;
            let ws = class_weights(&Tensor::new([n, 2], labels)?)?;
            let wt = class_weights(&s.pseudo_labels)?;
            let zt = tape.constant(s.features.clone());
            Some(lmmd_on_tape(&mut tape, zs, &ws, zt, &wt, &KernelSpec::default())?)
        }
        None => None,
    };
    let total = total_on_tape(&mut tape, dice, att, lmmd, cfg.loss)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let losses = StepLosses {
        dice: value(Some(dice)),
        att: value(att),
        lmmd: value(lmmd),
        total: value(Some(total)),
    };

    let grads = tape.backward(total)?;
    let term_grads = if cfg.term_grads {
        let norm = |v: Option<Var>, w: f64| -> Result<f64, FedError> {
            match v {
                Some(v) if w != 0.0 => Ok(w * grad_norm(&tape.backward(v)?)),
                _ => Ok(0.0),
            }
        };
        Some(TermGrads {
            dice: norm(Some(dice), 1.0)?,
            att: norm(att, cfg.loss.alpha_att)?,
            lmmd: norm(lmmd, cfg.loss.beta_lmmd)?,
        })
    } else {
        None
    };
    let named = grads.named();
    if let Some((name, _)) = named.iter().find(|(_, g)| !g.all_finite()) {
        return Err(FedError::NonFinite(format!("gradient of `{name}` is not finite")));
    }
    opt.step(weights.as_map_mut(), &named)?;
    Ok((losses, term_grads))
}

/// `(subject, start gate)` windows of one epoch.
fn window_plan(local: &SiteDataset, cfg: &FedConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut plan = Vec::new();
    for (s, subj) in local.subjects.iter().enumerate() {
        let g = subj.sequence.gate_count();
        let k = cfg.windows_per_subject;
        if k == 0 || k >= g {
            plan.extend((0..g).map(|t| (s, t)));
        } else {
            plan.extend(index::sample(rng, g, k).into_iter().map(|t| (s, t)));
        }
    }
    plan.shuffle(rng);
    plan
}

fn plan_len(local: &SiteDataset, cfg: &FedConfig) -> usize {
    local
        .subjects
        .iter()
        .map(|s| match cfg.windows_per_subject {
            0 => s.sequence.gate_count(),
            k => k.min(s.sequence.gate_count()),
        })
        .sum()
}

/// Copies `global`, runs `local_epochs` of minibatch optimization on the
/// site's labeled windows and returns the update.
pub fn client_local_train(
    global: &WeightSet,
    local: &SiteDataset,
    stats: Option<&TargetStats>,
    cfg: &FedConfig,
    opt: &mut OptimizerState,
    round: u32,
    seed: u64,
) -> Result<(ClientUpdate, ClientLog), FedError> {
    if !local.labeled {
        return Err(FedError::Unlabeled(local.id.clone()));
    }
    let samples = plan_len(local, cfg);
    if samples == 0 {
        return Err(FedError::Config(format!("site {} has no training windows", local.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = global.clone();
    let mut sum = StepLosses::default();
    let mut steps = 0;
    let mut term_grads = None;
    for _ in 0..cfg.local_epochs {
        let plan = window_plan(local, cfg, &mut rng);
        for chunk in plan.chunks(cfg.batch.max(1)) {
            let batch: Vec<GatedVolumeSequence> = chunk
                .iter()
                .map(|&(s, t)| local.subjects[s].sequence.window(t, cfg.model.gates))
                .collect();
            let (l, g) = train_step(&mut weights, &batch, stats, cfg, opt).map_err(|e| match e {
                FedError::Loss(LossError::NonFinite { component, value })
                | FedError::NonFiniteLoss { component, value, .. } => FedError::NonFiniteLoss {
                    client: local.id.clone(),
                    round,
                    step: steps,
                    component,
                    value,
                },
                other => other,
            })?;
            term_grads = term_grads.or(g);
            sum.dice += l.dice;
            sum.att += l.att;
            sum.lmmd += l.lmmd;
            sum.total += l.total;
            steps += 1;
        }
    }
    let k = steps.max(1) as f64;
    let losses = StepLosses {
        dice: sum.dice / k,
        att: sum.att / k,
        lmmd: sum.lmmd / k,
        total: sum.total / k,
    };
    let update = ClientUpdate {
        round,
        sample_count: samples as u32,
        weights,
    };
    let log = ClientLog {
        client: local.id.clone(),
        samples: samples as u32,
        steps,
        losses,
        term_grads,
        error: None,
    };
    Ok((update, log))
}

/// Statistics of the current global model on a seeded batch of target
/// windows: batch-averaged maps, patch features and soft pseudo labels.
pub fn target_publish_stats(
    global: &WeightSet,
    target: &SiteDataset,
    model: &ModelConfig,
    batch: usize,
    round: u32,
    seed: u64,
) -> Result<TargetStats, FedError> {
    if target.labeled {
        return Err(FedError::Config(format!("target site {} must be unlabeled", target.id)));
    }
    let available = target.window_count();
    if available == 0 {
        return Err(FedError::EmptyTarget(target.id.clone()));
    }
    if batch == 0 || batch > available {
        return Err(FedError::Config(format!(
            "target batch {batch} must be in 1..={available}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, available, batch).into_vec();
    let mut maps = Vec::with_capacity(batch);
    let mut features = Vec::new();
    let mut pseudo = Vec::new();
    for i in picks {
        let out = forward(&target.window(i, model.gates), global, model)?;
        features.extend_from_slice(out.features.data());
        pseudo.extend(token_soft_labels(out.prob.data(), model));
        maps.push(out.maps);
    }
    let n = batch * model.patches() * model.gates;
    Ok(TargetStats {
        round,
        maps: AttentionMaps::mean(&maps)?,
        features: Tensor::new([n, model.d_model], features)?,
        pseudo_labels: Tensor::new([n, 2], pseudo)?,
    })
}
