//! Divided space-time attention primitives.
//!
//! Tokens are laid out as `[CLS, (p=0,t=0), (p=1,t=0), …, (p=N-1,t=T-1)]`,
//! i.e. row `1 + t·N + p` holds patch `p` of gate `t`. Queries, keys and
//! values carry all heads side by side: head `a` owns columns
//! `a·D_h .. (a+1)·D_h`.
//!
//! Each patch query gets two softmaxes: a temporal one over
//! `{CLS} ∪ {(p, t') : t' < T}` and a spatial one over `{CLS} ∪ {(p', t) : p' < N}`.
//! The CLS query attends over every token. No primitive here ever holds an
//! `(N·T) × (N·T)` score block; [`peak_score_block`] reports the largest
//! per-head block materialized on this thread.

use std::cell::Cell;

use super::ops::{dot, softmax_in_place, softmax_row_backward};
use super::tape::{Backward, Tape, Var};
use super::tensor::{Tensor, TensorError};

thread_local! {
    static PEAK_SCORE_BLOCK: Cell<usize> = const { Cell::new(0) };
}

/// Largest per-head score block (query rows × keys) built on this thread
/// since the last [`reset_peak_score_block`].
pub fn peak_score_block() -> usize {
    PEAK_SCORE_BLOCK.with(Cell::get)
}

pub fn reset_peak_score_block() {
    PEAK_SCORE_BLOCK.with(|c| c.set(0));
}

fn note_score_block(size: usize) {
    PEAK_SCORE_BLOCK.with(|c| c.set(c.get().max(size)));
}

/// Token-grid geometry shared by the attention primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub patches: usize,
    pub gates: usize,
    pub d_model: usize,
}

impl AttentionLayout {
    pub fn tokens(&self) -> usize {
        1 + self.patches * self.gates
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    #[inline]
    pub fn token(&self, patch: usize, gate: usize) -> usize {
        1 + gate * self.patches + patch
    }

    fn check(&self, op: &'static str, shape: &[usize]) -> Result<(), TensorError> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(TensorError::Invalid {
                op,
                msg: format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            });
        }
        let want = [self.tokens(), self.d_model];
        if shape != want {
            return Err(TensorError::ShapeMismatch {
                op,
                left: want.to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Time,
    Space,
    Cls,
}

impl Axis {
    fn rows(self, l: &AttentionLayout) -> usize {
        match self {
            Axis::Time | Axis::Space => l.patches * l.gates,
            Axis::Cls => 1,
        }
    }

    fn keys(self, l: &AttentionLayout) -> usize {
        match self {
            Axis::Time => l.gates + 1,
            Axis::Space => l.patches + 1,
            Axis::Cls => l.tokens(),
        }
    }

    /// (query token, key-token function) for row `r` of one head.
    #[inline]
    fn query(self, l: &AttentionLayout, r: usize) -> usize {
        match self {
            Axis::Time => l.token(r / l.gates, r % l.gates),
            Axis::Space => l.token(r % l.patches, r / l.patches),
            Axis::Cls => 0,
        }
    }

    #[inline]
    fn key(self, l: &AttentionLayout, r: usize, j: usize) -> usize {
        if j == 0 {
            return 0;
        }
        match self {
            Axis::Time => l.token(r / l.gates, j - 1),
            Axis::Space => l.token(j - 1, r / l.patches),
            Axis::Cls => j,
        }
    }

    fn output_shape(self, l: &AttentionLayout) -> Vec<usize> {
        match self {
            Axis::Time => vec![l.heads, l.patches, l.gates, l.gates + 1],
            Axis::Space => vec![l.heads, l.gates, l.patches, l.patches + 1],
            Axis::Cls => vec![l.heads, l.tokens()],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::Time => "temporal_attention",
            Axis::Space => "spatial_attention",
            Axis::Cls => "cls_attention",
        }
    }
}

struct AttentionWeights {
    axis: Axis,
    layout: AttentionLayout,
}

impl Backward for AttentionWeights {
    fn name(&self) -> &'static str {
        self.axis.name()
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let l = &self.layout;
        let (q, k) = (inputs[0].data(), inputs[1].data());
        let (d, dh) = (l.d_model, l.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let (rows, keys) = (self.axis.rows(l), self.axis.keys(l));
        let y = out.data();
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut dl = vec![0.0; keys];
        for a in 0..l.heads {
            let c0 = a * dh;
            for r in 0..rows {
                let base = (a * rows + r) * keys;
                dl.copy_from_slice(&grad[base..base + keys]);
                softmax_row_backward(&y[base..base + keys], &mut dl);
                let qt = self.axis.query(l, r);
                for (j, &g) in dl.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let kt = self.axis.key(l, r, j);
                    let gs = g * scale;
                    for c in 0..dh {
                        gq[qt * d + c0 + c] += gs * k[kt * d + c0 + c];
                        gk[kt * d + c0 + c] += gs * q[qt * d + c0 + c];
                    }
                }
            }
        }
        vec![needs[0].then_some(gq), needs[1].then_some(gk)]
    }
}

struct Aggregate {
    layout: AttentionLayout,
}

impl Backward for Aggregate {
    fn name(&self) -> &'static str {
        "divided_aggregate"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let l = &self.layout;
        let (ta, sa, cw, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let (d, dh, n, t) = (l.d_model, l.head_dim(), l.patches, l.gates);
        let ntok = l.tokens();
        let mut g_ta = vec![0.0; ta.len()];
        let mut g_sa = vec![0.0; sa.len()];
        let mut g_cw = vec![0.0; cw.len()];
        let mut g_v = vec![0.0; v.len()];
        for a in 0..l.heads {
            let c0 = a * dh;
            let seg = |tok: usize| tok * d + c0..tok * d + c0 + dh;
            let g_cls = &grad[seg(0)];
            for j in 0..ntok {
                let w = cw[a * ntok + j];
                g_cw[a * ntok + j] = dot(g_cls, &v[seg(j)]);
                g_v[seg(j)].iter_mut().zip(g_cls).for_each(|(o, g)| *o += w * g);
            }
            for tt in 0..t {
                for p in 0..n {
                    let tok = l.token(p, tt);
                    let g_row = &grad[seg(tok)];
                    let tb = ((a * n + p) * t + tt) * (t + 1);
                    let sb = ((a * t + tt) * n + p) * (n + 1);
                    // CLS term, taken from the temporal softmax
                    g_ta[tb] = dot(g_row, &v[seg(0)]);
                    let w = ta[tb];
                    g_v[seg(0)].iter_mut().zip(g_row).for_each(|(o, g)| *o += w * g);
                    for t2 in 0..t {
                        let kt = l.token(p, t2);
                        g_ta[tb + 1 + t2] = dot(g_row, &v[seg(kt)]);
                        let w = ta[tb + 1 + t2];
                        g_v[seg(kt)].iter_mut().zip(g_row).for_each(|(o, g)| *o += w * g);
                    }
                    for p2 in 0..n {
                        let kt = l.token(p2, tt);
                        g_sa[sb + 1 + p2] = dot(g_row, &v[seg(kt)]);
                        let w = sa[sb + 1 + p2];
                        g_v[seg(kt)].iter_mut().zip(g_row).for_each(|(o, g)| *o += w * g);
                    }
                }
            }
        }
        vec![
            needs[0].then_some(g_ta),
            needs[1].then_some(g_sa),
            needs[2].then_some(g_cw),
            needs[3].then_some(g_v),
        ]
    }
}

impl Tape {
    fn attention_weights(&mut self, axis: Axis, q: Var, k: Var, layout: AttentionLayout) -> Result<Var, TensorError> {
        layout.check(axis.name(), self.shape(q))?;
        layout.check(axis.name(), self.shape(k))?;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let (d, dh) = (layout.d_model, layout.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let (rows, keys) = (axis.rows(&layout), axis.keys(&layout));
        note_score_block(rows * keys);
        let mut data = vec![0.0; layout.heads * rows * keys];
        for a in 0..layout.heads {
            let c0 = a * dh;
            for r in 0..rows {
                let qt = axis.query(&layout, r);
                let qrow = &qd[qt * d + c0..qt * d + c0 + dh];
                let base = (a * rows + r) * keys;
                let row = &mut data[base..base + keys];
                for (j, s) in row.iter_mut().enumerate() {
                    let kt = axis.key(&layout, r, j);
                    *s = dot(qrow, &kd[kt * d + c0..kt * d + c0 + dh]) * scale;
                }
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(axis.output_shape(&layout), data)?;
        Ok(self.push(value, vec![q, k], AttentionWeights { axis, layout }))
    }

    /// Temporal attention map `[A, N, T, T+1]`: per head and patch, each
    /// gate's query over `{CLS, gate 0..T}` of the same patch.
    pub fn temporal_attention(&mut self, q: Var, k: Var, layout: AttentionLayout) -> Result<Var, TensorError> {
        self.attention_weights(Axis::Time, q, k, layout)
    }

    /// Spatial attention map `[A, T, N, N+1]`: per head and gate, each
    /// patch's query over `{CLS, patch 0..N}` of the same gate.
    pub fn spatial_attention(&mut self, q: Var, k: Var, layout: AttentionLayout) -> Result<Var, TensorError> {
        self.attention_weights(Axis::Space, q, k, layout)
    }

    /// CLS query over all `1 + N·T` tokens, `[A, 1 + N·T]`.
    pub fn cls_attention(&mut self, q: Var, k: Var, layout: AttentionLayout) -> Result<Var, TensorError> {
        self.attention_weights(Axis::Cls, q, k, layout)
    }

    /// Combines value vectors with the three weight sets:
    ///
    /// `s(p,t) = α_time[CLS]·v_CLS + Σ_t' α_time[t']·v(p,t') + Σ_p' α_space[p']·v(p',t)`
    ///
    /// The spatial softmax's CLS entry only takes part in normalization.
    /// The CLS row is the plain full-attention average.
    pub fn divided_aggregate(
        &mut self,
        temporal: Var,
        spatial: Var,
        cls: Var,
        v: Var,
        layout: AttentionLayout,
    ) -> Result<Var, TensorError> {
        const OP: &str = "divided_aggregate";
        layout.check(OP, self.shape(v))?;
        for (var, axis) in [(temporal, Axis::Time), (spatial, Axis::Space), (cls, Axis::Cls)] {
            let want = axis.output_shape(&layout);
            if self.shape(var) != want.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    left: want,
                    right: self.shape(var).to_vec(),
                });
            }
        }
        let (ta, sa, cw, vd) = (
            self.value(temporal).data(),
            self.value(spatial).data(),
            self.value(cls).data(),
            self.value(v).data(),
        );
        let (d, dh, n, t) = (layout.d_model, layout.head_dim(), layout.patches, layout.gates);
        let ntok = layout.tokens();
        let mut out = vec![0.0; ntok * d];
        for a in 0..layout.heads {
            let c0 = a * dh;
            let acc = |dst: usize, w: f64, src: usize, out: &mut [f64]| {
                let (o, s) = (dst * d + c0, src * d + c0);
                for c in 0..dh {
                    out[o + c] += w * vd[s + c];
                }
            };
            for j in 0..ntok {
                acc(0, cw[a * ntok + j], j, &mut out);
            }
            for tt in 0..t {
                for p in 0..n {
                    let tok = layout.token(p, tt);
                    let tb = ((a * n + p) * t + tt) * (t + 1);
                    let sb = ((a * t + tt) * n + p) * (n + 1);
                    acc(tok, ta[tb], 0, &mut out);
                    for t2 in 0..t {
                        acc(tok, ta[tb + 1 + t2], layout.token(p, t2), &mut out);
                    }
                    for p2 in 0..n {
                        acc(tok, sa[sb + 1 + p2], layout.token(p2, tt), &mut out);
                    }
                }
            }
        }
        let value = Tensor::new([ntok, d], out)?;
        Ok(self.push(value, vec![temporal, spatial, cls, v], Aggregate { layout }))
    }
}
