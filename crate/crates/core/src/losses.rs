//! Training objectives: soft Dice, attention consistency, class-weighted
//! local MMD, and their weighted sum.
//!
//! Each loss has a tape form (used for training and gradient checks) and,
//! where useful, a plain value form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ops::dot;
use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::model::AttentionMaps;

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Multiples of the median pairwise squared distance used as kernel bandwidths.
pub const BANDWIDTH_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask is not binary at voxel {0}")]
    NonBinaryMask(usize),
    #[error("negative label mass {value} at sample {sample}, class {class}")]
    NegativeLabel { sample: usize, class: usize, value: f64 },
    #[error("no class mass: every class is empty on at least one side")]
    NoClassMass,
    #[error("{component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("loss weight {name} must be finite and non-negative, got {value}")]
    BadWeight { name: &'static str, value: f64 },
    #[error("attention maps come from different configs: {0}")]
    MapMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
}

/// Balancing factors of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_att: f64,
    pub beta_lmmd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_att: 0.01,
            beta_lmmd: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("alpha_att", self.alpha_att), ("beta_lmmd", self.beta_lmmd)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}

// ── Dice ────────────────────────────────────────────────────────────

fn check_mask(mask: &[u8]) -> Result<(), LossError> {
    match mask.iter().position(|&v| v > 1) {
        Some(i) => Err(LossError::NonBinaryMask(i)),
        None => Ok(()),
    }
}

/// `1 − (2·Σp·g + 1) / (Σp + Σg + 1)` on the tape.
pub fn dice_loss(tape: &mut Tape, prob: Var, mask: &[u8]) -> Result<Var, LossError> {
    check_mask(mask)?;
    let shape = tape.shape(prob).to_vec();
    if shape.iter().product::<usize>() != mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            left: shape,
            right: vec![mask.len()],
        }
        .into());
    }
    let g_sum: f64 = mask.iter().map(|&v| v as f64).sum();
    let g = tape.constant(Tensor::new(shape, mask.iter().map(|&v| v as f64).collect())?);
    let pg = tape.mul(prob, g)?;
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let p_sum = tape.sum(prob);
    let den = tape.add_scalar(p_sum, g_sum + DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Value form of [`dice_loss`].
pub fn dice_value(prob: &[f64], mask: &[u8]) -> Result<f64, LossError> {
    check_mask(mask)?;
    if prob.len() != mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            left: vec![prob.len()],
            right: vec![mask.len()],
        }
        .into());
    }
    let inter: f64 = prob.iter().zip(mask).map(|(p, &g)| p * g as f64).sum();
    let ps: f64 = prob.iter().sum();
    let gs: f64 = mask.iter().map(|&g| g as f64).sum();
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (ps + gs + DICE_SMOOTH))
}

// ── attention consistency ───────────────────────────────────────────

/// Consistency terms `(time, space, time + space)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionLoss<T> {
    pub time: T,
    pub space: T,
    pub total: T,
}

fn check_maps(a: &AttentionMaps, b: &AttentionMaps) -> Result<(), LossError> {
    if a.temporal.shape() != b.temporal.shape() || a.spatial.shape() != b.spatial.shape() {
        return Err(LossError::MapMismatch(format!(
            "temporal {:?} vs {:?}, spatial {:?} vs {:?}",
            a.temporal.shape(),
            b.temporal.shape(),
            a.spatial.shape(),
            b.spatial.shape()
        )));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
}

/// Mean absolute difference of batch-averaged maps, separately for the
/// temporal and spatial maps. Batch sizes may differ.
pub fn attention_consistency_loss(
    source: &[AttentionMaps],
    target: &[AttentionMaps],
) -> Result<AttentionLoss<f64>, LossError> {
    if source.is_empty() || target.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let s = AttentionMaps::mean(source).map_err(|e| LossError::MapMismatch(e.to_string()))?;
    let t = AttentionMaps::mean(target).map_err(|e| LossError::MapMismatch(e.to_string()))?;
    check_maps(&s, &t)?;
    let time = mean_abs_diff(&s.temporal, &t.temporal);
    let space = mean_abs_diff(&s.spatial, &t.spatial);
    Ok(AttentionLoss {
        time,
        space,
        total: time + space,
    })
}

fn batch_mean(tape: &mut Tape, vars: &[Var]) -> Result<Var, LossError> {
    let (&first, rest) = vars.split_first().ok_or(LossError::EmptyBatch)?;
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// Tape form: source maps are per-sample variables, the target is a fixed
/// batch average.
pub fn attention_consistency_on_tape(
    tape: &mut Tape,
    source_temporal: &[Var],
    source_spatial: &[Var],
    target: &AttentionMaps,
) -> Result<AttentionLoss<Var>, LossError> {
    let mut terms = [None, None];
    for (slot, (vars, tgt)) in terms
        .iter_mut()
        .zip([(source_temporal, &target.temporal), (source_spatial, &target.spatial)])
    {
        let avg = batch_mean(tape, vars)?;
        if tape.shape(avg) != tgt.shape() {
            return Err(LossError::MapMismatch(format!(
                "{:?} vs {:?}",
                tape.shape(avg),
                tgt.shape()
            )));
        }
        let t = tape.constant(tgt.clone());
        let diff = tape.sub(avg, t)?;
        let abs = tape.abs(diff);
        *slot = Some(tape.mean(abs)?);
    }
    let (time, space) = (terms[0].expect("set"), terms[1].expect("set"));
    let total = tape.add(time, space)?;
    Ok(AttentionLoss { time, space, total })
}

// ── class weights and kernels ───────────────────────────────────────

/// Per-class sample weights `ω[c][i] = y_ic / Σ_j y_jc`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeightVector {
    samples: usize,
    weights: Vec<Vec<f64>>,
    mass: Vec<f64>,
}

impl ClassWeightVector {
    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn class(&self, c: usize) -> &[f64] {
        &self.weights[c]
    }

    /// Whether class `c` had any label mass.
    pub fn has_mass(&self, c: usize) -> bool {
        self.mass[c] > 0.0
    }
}

/// Normalizes soft labels `[n, C]` per class. Empty classes get zero weights.
pub fn class_weights(soft_labels: &Tensor) -> Result<ClassWeightVector, LossError> {
    let (n, c) = match soft_labels.shape() {
        &[n, c] => (n, c),
        s => {
            return Err(TensorError::Rank {
                op: "class_weights",
                expected: 2,
                shape: s.to_vec(),
            }
            .into())
        }
    };
    let y = soft_labels.data();
    for (i, &v) in y.iter().enumerate() {
        if !(v >= 0.0) {
            return Err(LossError::NegativeLabel {
                sample: i / c,
                class: i % c,
                value: v,
            });
        }
    }
    let mut weights = vec![vec![0.0; n]; c];
    let mut mass = vec![0.0; c];
    for (k, w) in weights.iter_mut().enumerate() {
        let total: f64 = (0..n).map(|i| y[i * c + k]).sum();
        mass[k] = total;
        if total > 0.0 {
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = y[i * c + k] / total;
            }
        }
    }
    Ok(ClassWeightVector {
        samples: n,
        weights,
        mass,
    })
}

/// Bandwidth choice for the multi-Gaussian kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// multipliers × median pairwise squared distance of the pooled batch
    Median(Vec<f64>),
    /// explicit bandwidths
    Fixed(Vec<f64>),
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Median(BANDWIDTH_MULTIPLIERS.to_vec())
    }
}

impl KernelSpec {
    /// Concrete bandwidths for feature rows `a` and `b` (both `[_, d]`).
    ///
    /// Identical features give a zero median; the base then falls back to 1.
    pub fn bandwidths(&self, a: &Tensor, b: &Tensor) -> Vec<f64> {
        match self {
            KernelSpec::Fixed(s) => s.clone(),
            KernelSpec::Median(mult) => {
                let base = median_sq_distance(a, b);
                let base = if base > 0.0 && base.is_finite() { base } else { 1.0 };
                mult.iter().map(|m| m * base).collect()
            }
        }
    }
}

/// Median of squared distances over distinct pairs of the pooled rows.
pub fn median_sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    let d = *a.shape().last().unwrap_or(&1);
    let pooled: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    let n = pooled.len() / d.max(1);
    if n < 2 {
        return 0.0;
    }
    let rows: Vec<&[f64]> = pooled.chunks(d).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push((norms[i] + norms[j] - 2.0 * dot(rows[i], rows[j])).max(0.0));
        }
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Value form of the multi-Gaussian kernel matrix `[na, nb]`.
pub fn gaussian_kernel(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<Tensor, LossError> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let k = tape.gaussian_kernel(va, vb, &spec.bandwidths(a, b))?;
    Ok(tape.value(k).clone())
}

// ── LMMD ────────────────────────────────────────────────────────────

/// Classes with label mass on both sides.
fn shared_classes(ws: &ClassWeightVector, wt: &ClassWeightVector) -> Result<Vec<usize>, LossError> {
    if ws.classes() != wt.classes() {
        return Err(LossError::MapMismatch(format!(
            "{} source classes vs {} target classes",
            ws.classes(),
            wt.classes()
        )));
    }
    let active: Vec<usize> = (0..ws.classes())
        .filter(|&c| ws.has_mass(c) && wt.has_mass(c))
        .collect();
    if active.is_empty() {
        return Err(LossError::NoClassMass);
    }
    Ok(active)
}

/// `P[i, j] = Σ_{c ∈ active} a_c[i]·b_c[j]`
fn pair_weights(a: &ClassWeightVector, b: &ClassWeightVector, active: &[usize]) -> Tensor {
    let (na, nb) = (a.samples(), b.samples());
    let mut p = vec![0.0; na * nb];
    for &c in active {
        let (wa, wb) = (a.class(c), b.class(c));
        for i in 0..na {
            if wa[i] == 0.0 {
                continue;
            }
            for j in 0..nb {
                p[i * nb + j] += wa[i] * wb[j];
            }
        }
    }
    Tensor::new([na, nb], p).expect("pair weight shape")
}

/// Class-weighted squared RKHS distance between source and target feature
/// means, averaged over classes present on both sides:
///
/// `(1/|A|) Σ_{c ∈ A} [ωSᵀ K_ss ωS + ωTᵀ K_tt ωT − 2 ωSᵀ K_st ωT]`
///
/// Bandwidths are computed from the current values and held fixed.
pub fn lmmd_on_tape(
    tape: &mut Tape,
    z_source: Var,
    w_source: &ClassWeightVector,
    z_target: Var,
    w_target: &ClassWeightVector,
    spec: &KernelSpec,
) -> Result<Var, LossError> {
    let active = shared_classes(w_source, w_target)?;
    let (ns, nt) = (tape.shape(z_source)[0], tape.shape(z_target)[0]);
    if ns != w_source.samples() || nt != w_target.samples() {
        return Err(TensorError::ShapeMismatch {
            op: "lmmd",
            left: vec![ns, nt],
            right: vec![w_source.samples(), w_target.samples()],
        }
        .into());
    }
    let bw = spec.bandwidths(tape.value(z_source), tape.value(z_target));
    let mut terms = Vec::with_capacity(3);
    for (za, wa, zb, wb, coef) in [
        (z_source, w_source, z_source, w_source, 1.0),
        (z_target, w_target, z_target, w_target, 1.0),
        (z_source, w_source, z_target, w_target, -2.0),
    ] {
        let k = tape.gaussian_kernel(za, zb, &bw)?;
        let p = tape.constant(pair_weights(wa, wb, &active));
        let kp = tape.mul(k, p)?;
        let s = tape.sum(kp);
        terms.push(tape.scale(s, coef));
    }
    let ss_tt = tape.add(terms[0], terms[1])?;
    let all = tape.add(ss_tt, terms[2])?;
    Ok(tape.scale(all, 1.0 / active.len() as f64))
}

/// Value form of [`lmmd_on_tape`].
pub fn lmmd_loss(
    z_source: &Tensor,
    labels_source: &Tensor,
    z_target: &Tensor,
    labels_target: &Tensor,
    spec: &KernelSpec,
) -> Result<f64, LossError> {
    let ws = class_weights(labels_source)?;
    let wt = class_weights(labels_target)?;
    let mut tape = Tape::new();
    let (s, t) = (tape.constant(z_source.clone()), tape.constant(z_target.clone()));
    let l = lmmd_on_tape(&mut tape, s, &ws, t, &wt, spec)?;
    Ok(tape.value(l).item())
}

// ── combination ─────────────────────────────────────────────────────

fn check_finite(component: &'static str, value: f64) -> Result<(), LossError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite { component, value })
    }
}

/// `L = L_Dice + α·L_att + β·L_lmmd`.
pub fn total_loss(dice: f64, att: f64, lmmd: f64, w: LossWeights) -> Result<f64, LossError> {
    w.validate()?;
    check_finite("dice", dice)?;
    check_finite("attention", att)?;
    check_finite("lmmd", lmmd)?;
    Ok(dice + w.alpha_att * att + w.beta_lmmd * lmmd)
}

/// Tape form of [`total_loss`]; absent terms contribute nothing.
pub fn total_on_tape(
    tape: &mut Tape,
    dice: Var,
    att: Option<Var>,
    lmmd: Option<Var>,
    w: LossWeights,
) -> Result<Var, LossError> {
    w.validate()?;
    let mut total = dice;
    for (term, weight) in [(att, w.alpha_att), (lmmd, w.beta_lmmd)] {
        if let Some(v) = term {
            let scaled = tape.scale(v, weight);
            total = tape.add(total, scaled)?;
        }
    }
    for (name, v) in [("dice", Some(dice)), ("attention", att), ("lmmd", lmmd)] {
        if let Some(v) = v {
            check_finite(name, tape.value(v).item())?;
        }
    }
    Ok(total)
}
