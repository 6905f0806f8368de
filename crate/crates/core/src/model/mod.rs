//! Divided space-time attention segmentation model.
//!
//! A window of `T` gated volumes is cut into `P³` patches, embedded with a
//! learnable positional table and a CLS token, passed through `L` blocks of
//! divided attention, and the final CLS embedding is decoded by a one-hidden
//! layer MLP into a `V³` probability volume.

mod input;
mod weights;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AttentionLayout, Tape, Tensor, TensorError, Var};

pub use input::{assemble, patch_means, patchify, GatedVolumeSequence, InputError, Mask, Structure};
pub(crate) use weights::Reader;
pub use weights::{
    expected_shapes, init_weights, parameter_count, WeightFormatError, WeightSet, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

use weights::block_name;

pub const LN_EPS: f64 = 1e-5;

/// Probability threshold used to binarize predictions.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("weight set is missing: {}", .0.join(", "))]
    MissingWeights(Vec<String>),
    #[error("weight `{name}` has shape {got:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input is {}³ × {} gates, model expects {}³ × {} gates", got.0, got.1, expected.0, expected.1)]
    InputShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("head index {head} out of range for {heads} heads")]
    HeadIndex { head: usize, heads: usize },
    #[error(transparent)]
    Input(#[from] InputError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub volume_side: usize,
    pub patch_side: usize,
    pub gates: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            volume_side: 32,
            patch_side: 8,
            gates: 2,
            d_model: 64,
            heads: 4,
            blocks: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        for (key, v) in [
            ("volume_side", self.volume_side),
            ("patch_side", self.patch_side),
            ("gates", self.gates),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return fail(format!("{key} must be at least 1"));
            }
        }
        if !self.volume_side.is_multiple_of(self.patch_side) {
            return fail(format!(
                "volume_side {} is not divisible by patch_side {}",
                self.volume_side, self.patch_side
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        Ok(())
    }

    /// Patches per gate, `(V/P)³`.
    pub fn patches(&self) -> usize {
        (self.volume_side / self.patch_side).pow(3)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side.pow(3)
    }

    pub fn tokens(&self) -> usize {
        1 + self.patches() * self.gates
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn voxels(&self) -> usize {
        self.volume_side.pow(3)
    }

    pub fn layout(&self) -> AttentionLayout {
        AttentionLayout {
            heads: self.heads,
            patches: self.patches(),
            gates: self.gates,
            d_model: self.d_model,
        }
    }
}

/// Last-block attention maps of one sample (or a batch average).
///
/// `temporal` is `[A, N, T, T+1]`, `spatial` is `[A, T, N, N+1]`; key index
/// 0 is the CLS token in both.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub temporal: Tensor,
    pub spatial: Tensor,
}

impl AttentionMaps {
    /// Elementwise mean over a non-empty batch of same-shaped maps.
    pub fn mean(batch: &[AttentionMaps]) -> Result<AttentionMaps, ModelError> {
        let first = batch
            .first()
            .ok_or_else(|| ModelError::Config("cannot average an empty batch of attention maps".into()))?;
        let mut t = first.temporal.clone();
        let mut s = first.spatial.clone();
        for m in &batch[1..] {
            for (acc, other, op) in [(&mut t, &m.temporal, "temporal"), (&mut s, &m.spatial, "spatial")] {
                if acc.shape() != other.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: if op == "temporal" {
                            "mean temporal maps"
                        } else {
                            "mean spatial maps"
                        },
                        left: acc.shape().to_vec(),
                        right: other.shape().to_vec(),
                    }
                    .into());
                }
                acc.data_mut().iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        Ok(AttentionMaps {
            temporal: t.map(|v| v * inv),
            spatial: s.map(|v| v * inv),
        })
    }

    /// Largest deviation of any key-axis row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let row_err = |t: &Tensor| {
            let keys = *t.shape().last().unwrap_or(&1);
            t.data()
                .chunks(keys)
                .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max)
        };
        row_err(&self.temporal).max(row_err(&self.spatial))
    }
}

/// Output of a pure forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    /// `[V, V, V]`, strictly inside (0, 1)
    pub prob: Tensor,
    /// final-block patch tokens `[N·T, d_model]`, CLS excluded
    pub features: Tensor,
    pub maps: AttentionMaps,
}

impl SegmentationOutput {
    pub fn binary_mask(&self) -> Mask {
        self.prob
            .data()
            .iter()
            .map(|&p| u8::from(p >= MASK_THRESHOLD))
            .collect()
    }
}

/// Weights bound to a tape as trainable parameters or constants.
pub struct BoundWeights {
    vars: BTreeMap<String, Var>,
}

impl BoundWeights {
    /// Validates `weights` against `cfg` and registers every array.
    pub fn bind(tape: &mut Tape, weights: &WeightSet, cfg: &ModelConfig, trainable: bool) -> Result<Self, ModelError> {
        cfg.validate()?;
        let expected = expected_shapes(cfg);
        let missing: Vec<String> = expected.keys().filter(|n| weights.get(n).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(ModelError::MissingWeights(missing));
        }
        let mut vars = BTreeMap::new();
        for (name, shape) in expected {
            let t = weights.get(&name).expect("checked above");
            if t.shape() != shape.as_slice() {
                return Err(ModelError::WeightShape {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
            let var = if trainable {
                tape.param(name.clone(), t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name, var);
        }
        Ok(Self { vars })
    }

    /// Wraps variables already on a tape, keyed by weight name.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn block(&self, block: usize, field: &str) -> Var {
        self.vars[&block_name(block, field)]
    }
}

/// Last-block maps and CLS weights on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MapVars {
    pub temporal: Var,
    pub spatial: Var,
    pub cls: Var,
}

/// Handles produced by [`forward_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub prob: Var,
    pub features: Var,
    pub tokens: Var,
    pub maps: MapVars,
}

/// Token grid `[1 + N·T, d]`: `E·x(p,t) + e_pos(p,t)` with the CLS row first.
pub fn embed(tape: &mut Tape, patches: Var, e: Var, pos: Var, cls: Var) -> Result<Var, ModelError> {
    let emb = tape.matmul_t(patches, e)?;
    let grid = tape.concat(&[cls, emb], 0)?;
    Ok(tape.add(grid, pos)?)
}

/// Per-head query, key and value `[1 + N·T, D_h]` from `W·LN(z)`.
pub fn qkv_project(
    tape: &mut Tape,
    z: Var,
    weights: &BoundWeights,
    block: usize,
    head: usize,
    cfg: &ModelConfig,
) -> Result<(Var, Var, Var), ModelError> {
    if head >= cfg.heads {
        return Err(ModelError::HeadIndex { head, heads: cfg.heads });
    }
    let h = tape.layer_norm(
        z,
        weights.block(block, "ln1.gamma"),
        weights.block(block, "ln1.beta"),
        LN_EPS,
    )?;
    let dh = cfg.head_dim();
    let mut out = [h; 3];
    for (slot, field) in out.iter_mut().zip(["w_q", "w_k", "w_v"]) {
        let w = tape.slice(weights.block(block, field), 0, head * dh, dh)?;
        *slot = tape.matmul_t(h, w)?;
    }
    Ok((out[0], out[1], out[2]))
}

/// Divided attention for packed heads; returns `s` and the weight maps.
pub fn divided_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    layout: AttentionLayout,
) -> Result<(Var, MapVars), ModelError> {
    let temporal = tape.temporal_attention(q, k, layout)?;
    let spatial = tape.spatial_attention(q, k, layout)?;
    let cls = tape.cls_attention(q, k, layout)?;
    let s = tape.divided_aggregate(temporal, spatial, cls, v, layout)?;
    Ok((s, MapVars { temporal, spatial, cls }))
}

fn mlp(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var, ModelError> {
    let h = tape.matmul_t(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul_t(h, w2)?;
    Ok(tape.add_bias(o, b2)?)
}

/// One encoder block:
/// `z' = W_O·[s¹ … sᴬ] + z_prev`, then `z = MLP(LN(z')) + z'`.
pub fn block_forward(
    tape: &mut Tape,
    z_prev: Var,
    weights: &BoundWeights,
    block: usize,
    cfg: &ModelConfig,
) -> Result<(Var, MapVars), ModelError> {
    let w = |f: &str| weights.block(block, f);
    let h = tape.layer_norm(z_prev, w("ln1.gamma"), w("ln1.beta"), LN_EPS)?;
    let q = tape.matmul_t(h, w("w_q"))?;
    let k = tape.matmul_t(h, w("w_k"))?;
    let v = tape.matmul_t(h, w("w_v"))?;
    let (s, maps) = divided_attention(tape, q, k, v, cfg.layout())?;
    let proj = tape.matmul_t(s, w("w_o"))?;
    let z_mid = tape.add(proj, z_prev)?;
    let n = tape.layer_norm(z_mid, w("ln2.gamma"), w("ln2.beta"), LN_EPS)?;
    let m = mlp(tape, n, w("mlp.w1"), w("mlp.b1"), w("mlp.w2"), w("mlp.b2"))?;
    Ok((tape.add(m, z_mid)?, maps))
}

/// Runs all blocks; returns final tokens, patch features and last-block maps.
pub fn encode(
    tape: &mut Tape,
    patches: Var,
    weights: &BoundWeights,
    cfg: &ModelConfig,
) -> Result<(Var, Var, MapVars), ModelError> {
    let mut z = embed(
        tape,
        patches,
        weights.get("embed.E"),
        weights.get("embed.pos"),
        weights.get("embed.cls"),
    )?;
    let mut last = None;
    for b in 0..cfg.blocks {
        let (next, maps) = block_forward(tape, z, weights, b, cfg)?;
        z = next;
        last = Some(maps);
    }
    let maps = last.ok_or_else(|| ModelError::Config("blocks must be at least 1".into()))?;
    let features = tape.slice(z, 0, 1, cfg.patches() * cfg.gates)?;
    Ok((z, features, maps))
}

/// `sigmoid(MLP(LN(cls)))` reshaped to `[V, V, V]`.
pub fn segment_head(tape: &mut Tape, cls: Var, weights: &BoundWeights, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let n = tape.layer_norm(cls, weights.get("head.ln.gamma"), weights.get("head.ln.beta"), LN_EPS)?;
    let logits = mlp(
        tape,
        n,
        weights.get("head.w1"),
        weights.get("head.b1"),
        weights.get("head.w2"),
        weights.get("head.b2"),
    )?;
    let prob = tape.sigmoid(logits);
    let v = cfg.volume_side;
    Ok(tape.reshape(prob, &[v, v, v])?)
}

/// Full forward pass recorded on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    x: &GatedVolumeSequence,
    weights: &BoundWeights,
    cfg: &ModelConfig,
) -> Result<ForwardVars, ModelError> {
    let patches = tape.constant(patchify(x, cfg)?);
    let (tokens, features, maps) = encode(tape, patches, weights, cfg)?;
    let cls = tape.slice(tokens, 0, 0, 1)?;
    let prob = segment_head(tape, cls, weights, cfg)?;
    Ok(ForwardVars {
        prob,
        features,
        tokens,
        maps,
    })
}

/// Pure forward pass: no gradients, no state.
pub fn forward(
    x: &GatedVolumeSequence,
    weights: &WeightSet,
    cfg: &ModelConfig,
) -> Result<SegmentationOutput, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, cfg, false)?;
    let out = forward_on_tape(&mut tape, x, &bound, cfg)?;
    Ok(SegmentationOutput {
        prob: tape.value(out.prob).clone(),
        features: tape.value(out.features).clone(),
        maps: AttentionMaps {
            temporal: tape.value(out.maps.temporal).clone(),
            spatial: tape.value(out.maps.spatial).clone(),
        },
    })
}
