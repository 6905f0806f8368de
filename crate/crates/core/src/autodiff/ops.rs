//! Core differentiable primitives.
//!
//! Binary elementwise ops broadcast the right operand only along trailing
//! singleton axes (`[n, d]` with `[n, 1]`), or from a one-element tensor.
//! Anything else has to be an explicit reshape or [`Tape::add_bias`].

use super::tape::{Backward, Tape, Var};
use super::tensor::{split_axis, Tensor, TensorError};

// ── dense kernels ───────────────────────────────────────────────────

/// out[m,n] = a[m,k] · b[k,n]
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// out[m,n] = a[k,m]ᵀ · b[k,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four lanes so the loop vectorizes
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Block length over which the right operand repeats, or `None` if the
/// shapes do not conform.
fn broadcast_block(a: &[usize], b: &[usize]) -> Option<usize> {
    let a_n: usize = a.iter().product();
    if a == b {
        return Some(1);
    }
    if b.iter().product::<usize>() == 1 {
        return Some(a_n);
    }
    if a.len() != b.len() {
        return None;
    }
    let k = a.iter().zip(b).position(|(x, y)| x != y)?;
    if b[k..].iter().all(|&d| d == 1) {
        Some(a[k..].iter().product())
    } else {
        None
    }
}

// ── elementwise binary ──────────────────────────────────────────────

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    kind: BinaryKind,
    block: usize,
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let bl = self.block;
        let ga = needs[0].then(|| match self.kind {
            BinaryKind::Add | BinaryKind::Sub => grad.to_vec(),
            BinaryKind::Mul => grad.iter().enumerate().map(|(i, g)| g * b[i / bl]).collect(),
            BinaryKind::Div => grad.iter().enumerate().map(|(i, g)| g / b[i / bl]).collect(),
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; b.len()];
            for (i, g) in grad.iter().enumerate() {
                let j = i / bl;
                gb[j] += match self.kind {
                    BinaryKind::Add => *g,
                    BinaryKind::Sub => -g,
                    BinaryKind::Mul => g * a[i],
                    BinaryKind::Div => -g * a[i] / (b[j] * b[j]),
                };
            }
            gb
        });
        vec![ga, gb]
    }
}

// ── unary ───────────────────────────────────────────────────────────

struct Scale(f64);

impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

struct Identity(&'static str);

impl Backward for Identity {
    fn name(&self) -> &'static str {
        self.0
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Abs;

impl Backward for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(g, &v)| {
                    if v > 0.0 {
                        *g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect(),
        )]
    }
}

struct Relu;

impl Backward for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

struct Gelu;

impl Backward for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(grad.iter().zip(x).map(|(g, &v)| g * gelu_grad(v)).collect())]
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Sigmoid;

impl Backward for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let y = out.data();
        vec![Some(grad.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect())]
    }
}

// ── reductions ──────────────────────────────────────────────────────

struct Sum {
    scale: f64,
    n: usize,
}

impl Backward for Sum {
    fn name(&self) -> &'static str {
        if self.scale == 1.0 {
            "sum"
        } else {
            "mean"
        }
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; self.n])]
    }
}

// ── linear algebra ──────────────────────────────────────────────────

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (m, k, n) = (self.m, self.k, self.n);
        vec![
            needs[0].then(|| gemm_nt(grad, b, m, n, k)),
            needs[1].then(|| gemm_tn(a, grad, m, k, n)),
        ]
    }
}

/// a[m,k] · b[n,k]ᵀ
struct MatMulT {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMulT {
    fn name(&self) -> &'static str {
        "matmul_t"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (m, k, n) = (self.m, self.k, self.n);
        vec![
            needs[0].then(|| gemm(grad, b, m, n, k)),
            needs[1].then(|| gemm_tn(grad, a, m, n, k)),
        ]
    }
}

struct Transpose {
    rows: usize,
    cols: usize,
}

impl Backward for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(transpose_data(grad, self.cols, self.rows))]
    }
}

struct Concat {
    axis_extents: Vec<usize>,
    outer: usize,
    inner: usize,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.axis_extents.iter().sum();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.axis_extents.len());
        for (i, &ext) in self.axis_extents.iter().enumerate() {
            if needs[i] {
                let mut g = Vec::with_capacity(self.outer * ext * self.inner);
                for o in 0..self.outer {
                    let base = (o * total + start) * self.inner;
                    g.extend_from_slice(&grad[base..base + ext * self.inner]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            start += ext;
        }
        out
    }
}

struct Slice {
    outer: usize,
    extent: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl Backward for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.outer * self.extent * self.inner];
        let chunk = self.len * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.extent + self.start) * self.inner;
            g[dst..dst + chunk].copy_from_slice(&grad[o * chunk..(o + 1) * chunk]);
        }
        vec![Some(g)]
    }
}

struct AddBias {
    cols: usize,
}

impl Backward for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; self.cols];
            for row in grad.chunks(self.cols) {
                gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            gb
        });
        vec![needs[0].then(|| grad.to_vec()), gb]
    }
}

// ── normalization ───────────────────────────────────────────────────

struct Softmax {
    outer: usize,
    extent: usize,
    inner: usize,
}

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let y = out.data();
        let mut g = vec![0.0; y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |j: usize| (o * self.extent + j) * self.inner + i;
                let s: f64 = (0..self.extent).map(|j| grad[at(j)] * y[at(j)]).sum();
                for j in 0..self.extent {
                    g[at(j)] = y[at(j)] * (grad[at(j)] - s);
                }
            }
        }
        vec![Some(g)]
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// In-place VJP of a softmax row: `grad` becomes the gradient w.r.t. logits.
pub(crate) fn softmax_row_backward(y: &[f64], grad: &mut [f64]) {
    let s: f64 = y.iter().zip(grad.iter()).map(|(a, b)| a * b).sum();
    for (g, &p) in grad.iter_mut().zip(y) {
        *g = p * (*g - s);
    }
}

struct LayerNorm {
    cols: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let d = self.cols;
        let nf = d as f64;
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; grad.len()];
            for (r, (grow, out)) in grad.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                let xh = &self.xhat[r * d..(r + 1) * d];
                let dxhat: Vec<f64> = grow.iter().zip(gamma).map(|(g, w)| g * w).collect();
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                let k = self.inv_std[r] / nf;
                for j in 0..d {
                    out[j] = k * (nf * dxhat[j] - s1 - xh[j] * s2);
                }
            }
            gx
        });
        let gg = needs[1].then(|| {
            let mut gg = vec![0.0; d];
            for (grow, xh) in grad.chunks(d).zip(self.xhat.chunks(d)) {
                for j in 0..d {
                    gg[j] += grow[j] * xh[j];
                }
            }
            gg
        });
        let gbeta = needs[2].then(|| {
            let mut gb = vec![0.0; d];
            for grow in grad.chunks(d) {
                gb.iter_mut().zip(grow).for_each(|(a, g)| *a += g);
            }
            gb
        });
        vec![gx, gg, gbeta]
    }
}

// ── tape methods ────────────────────────────────────────────────────

impl Tape {
    fn binary(&mut self, kind: BinaryKind, op: &'static str, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let block = broadcast_block(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let (x, y) = (ta.data(), tb.data());
        let data: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let w = y[i / block];
                match kind {
                    BinaryKind::Add => v + w,
                    BinaryKind::Sub => v - w,
                    BinaryKind::Mul => v * w,
                    BinaryKind::Div => v / w,
                }
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, vec![a, b], Binary { kind, block }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, vec![a], Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, vec![a], Identity("add_scalar"))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, vec![a], Abs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, vec![a], Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, vec![a], Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, vec![a], Sigmoid)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel();
        let value = Tensor::scalar(t.data().iter().sum());
        self.push(value, vec![a], Sum { scale: 1.0, n })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n = t.numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "mean",
                axis: 0,
                shape: t.shape().to_vec(),
            });
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / n as f64);
        Ok(self.push(
            value,
            vec![a],
            Sum {
                scale: 1.0 / n as f64,
                n,
            },
        ))
    }

    fn check_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.check_rank2("matmul", a)?;
        let (k2, n) = self.check_rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new([m, n], data)?;
        Ok(self.push(value, vec![a, b], MatMul { m, k, n }))
    }

    /// `a · bᵀ` without materializing the transpose; `b` is `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.check_rank2("matmul_t", a)?;
        let (n, k2) = self.check_rank2("matmul_t", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let data = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new([m, n], data)?;
        Ok(self.push(value, vec![a, b], MatMulT { m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.check_rank2("transpose", a)?;
        let data = transpose_data(self.value(a).data(), rows, cols);
        let value = Tensor::new([cols, rows], data)?;
        Ok(self.push(value, vec![a], Transpose { rows, cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(value, vec![a], Identity("reshape")))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let conforms =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conforms {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &ext) in parts.iter().zip(&extents) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Concat {
                axis_extents: extents,
                outer,
                inner,
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                shape,
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            vec![a],
            Slice {
                outer,
                extent,
                inner,
                start,
                len,
            },
        ))
    }

    /// `x[n, d] + b[d]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, cols) = self.check_rank2("add_bias", x)?;
        let bias = self.value(b);
        if bias.numel() != cols || bias.rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let bd = bias.data();
        let t = self.value(x);
        let data = t.data().iter().enumerate().map(|(i, v)| v + bd[i % cols]).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, vec![x, b], AddBias { cols }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                shape,
            });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        let mut row = vec![0.0; extent];
        for o in 0..outer {
            for i in 0..inner {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = src[(o * extent + j) * inner + i];
                }
                softmax_in_place(&mut row);
                for (j, r) in row.iter().enumerate() {
                    data[(o * extent + j) * inner + i] = *r;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, vec![a], Softmax { outer, extent, inner }))
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let d = *shape.last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        if d == 0 {
            return Err(TensorError::EmptyAxis {
                op: "layer_norm",
                axis: shape.len() - 1,
                shape,
            });
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.numel() / d;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, vec![x, gamma, beta], LayerNorm { cols: d, xhat, inv_std }))
    }
}
