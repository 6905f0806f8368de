use super::ops::{gemm, gemm_nt, gemm_tn};
use super::tape::{Backward, Tape, Var};
use super::tensor::{Tensor, TensorError};

/// Squared Euclidean distances between rows of `a[na, d]` and `b[nb, d]`,
/// expanded as ‖a‖² + ‖b‖² − 2a·b and clamped at zero.
pub fn pairwise_sq_dists(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let (na, nb) = (a.len() / d, b.len() / d);
    let norms = |x: &[f64]| -> Vec<f64> { x.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect() };
    let (an, bn) = (norms(a), norms(b));
    let mut out = gemm_nt(a, b, na, d, nb);
    for (i, row) in out.chunks_mut(nb).enumerate() {
        for (o, &bj) in row.iter_mut().zip(&bn) {
            *o = (an[i] + bj - 2.0 * *o).max(0.0);
        }
    }
    out
}

struct MultiGaussian {
    d: usize,
    /// Σ_m exp(-‖a_i - b_j‖² / σ_m) / σ_m per pair.
    slope: Vec<f64>,
}

impl Backward for MultiGaussian {
    fn name(&self) -> &'static str {
        "gaussian_kernel"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let d = self.d;
        let (na, nb) = (a.len() / d, b.len() / d);
        // c_ij = dL/d(dist²_ij)·2 = -2·g_ij·slope_ij; then
        // ga_i = Σ_j c_ij (a_i - b_j) and gb_j = -Σ_i c_ij (a_i - b_j)
        let c: Vec<f64> = grad.iter().zip(&self.slope).map(|(g, s)| -2.0 * g * s).collect();
        let ga = needs[0].then(|| {
            let mut out = gemm(&c, b, na, nb, d);
            for i in 0..na {
                let row: f64 = c[i * nb..(i + 1) * nb].iter().sum();
                for k in 0..d {
                    out[i * d + k] = row * a[i * d + k] - out[i * d + k];
                }
            }
            out
        });
        let gb = needs[1].then(|| {
            let mut out = gemm_tn(&c, a, na, nb, d);
            for j in 0..nb {
                let col: f64 = (0..na).map(|i| c[i * nb + j]).sum();
                for k in 0..d {
                    out[j * d + k] = col * b[j * d + k] - out[j * d + k];
                }
            }
            out
        });
        vec![ga, gb]
    }
}

impl Tape {
    /// Sum of Gaussian kernels `Σ_m exp(-‖a_i - b_j‖² / σ_m)` over rows.
    pub fn gaussian_kernel(&mut self, a: Var, b: Var, bandwidths: &[f64]) -> Result<Var, TensorError> {
        const OP: &str = "gaussian_kernel";
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: sa,
                right: sb,
            });
        }
        if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(TensorError::Invalid {
                op: OP,
                msg: format!("bandwidths must be positive and finite, got {bandwidths:?}"),
            });
        }
        let d = sa[1];
        let dist = pairwise_sq_dists(self.value(a).data(), self.value(b).data(), d);
        // exp(-r/σ) = u^p with u = exp(-r/σ_max) whenever σ_max/σ is a
        // small integer p, which covers the usual power-of-two ladders
        let sigma_max = bandwidths.iter().copied().fold(0.0, f64::max);
        let powers: Vec<Option<i32>> = bandwidths
            .iter()
            .map(|&s| {
                let p = sigma_max / s;
                (p.fract() == 0.0 && p <= 64.0).then_some(p as i32)
            })
            .collect();
        let mut k = Vec::with_capacity(dist.len());
        let mut slope = Vec::with_capacity(dist.len());
        for &r in &dist {
            let u = (-r / sigma_max).exp();
            let (mut kv, mut sv) = (0.0, 0.0);
            for (&s, p) in bandwidths.iter().zip(&powers) {
                let e = match p {
                    Some(p) => u.powi(*p),
                    None => (-r / s).exp(),
                };
                kv += e;
                sv += e / s;
            }
            k.push(kv);
            slope.push(sv);
        }
        let value = Tensor::new([sa[0], sb[0]], k)?;
        Ok(self.push(value, vec![a, b], MultiGaussian { d, slope }))
    }
}
