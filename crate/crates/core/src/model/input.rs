use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

use super::{ModelConfig, ModelError};

/// Binary voxel mask, one byte (0 or 1) per voxel in `(z, y, x)` order.
pub type Mask = Vec<u8>;

/// Segmentation target. One model instance is trained per structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Endo,
    Epi,
}

impl Structure {
    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Endo => "endo",
            Structure::Epi => "epi",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "endo" => Ok(Structure::Endo),
            "epi" => Ok(Structure::Epi),
            other => Err(format!("expected `endo` or `epi`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InputError {
    #[error("gate {gate} has {len} voxels, expected {expected}")]
    GateSize { gate: usize, len: usize, expected: usize },
    #[error("sequence has no gates")]
    NoGates,
    #[error("non-finite voxel at gate {gate}, index {index}")]
    NonFinite { gate: usize, index: usize },
    #[error("{which} masks: expected {expected} gates of {voxels} voxels")]
    MaskShape {
        which: &'static str,
        expected: usize,
        voxels: usize,
    },
    #[error("{which} mask at gate {gate} is not binary")]
    NonBinary { which: &'static str, gate: usize },
    #[error("endocardial mask is not contained in the epicardial mask at gate {gate}")]
    NotNested { gate: usize },
}

/// A cyclic series of `side³` volumes, one per gate, with optional
/// per-gate endocardial and epicardial masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedVolumeSequence {
    side: usize,
    gates: Vec<Vec<f32>>,
    endo: Option<Vec<Mask>>,
    epi: Option<Vec<Mask>>,
}

impl GatedVolumeSequence {
    pub fn new(
        side: usize,
        gates: Vec<Vec<f32>>,
        endo: Option<Vec<Mask>>,
        epi: Option<Vec<Mask>>,
    ) -> Result<Self, InputError> {
        if gates.is_empty() {
            return Err(InputError::NoGates);
        }
        let voxels = side * side * side;
        for (g, vol) in gates.iter().enumerate() {
            if vol.len() != voxels {
                return Err(InputError::GateSize {
                    gate: g,
                    len: vol.len(),
                    expected: voxels,
                });
            }
            if let Some(index) = vol.iter().position(|v| !v.is_finite()) {
                return Err(InputError::NonFinite { gate: g, index });
            }
        }
        for (which, masks) in [("endo", &endo), ("epi", &epi)] {
            let Some(masks) = masks else { continue };
            if masks.len() != gates.len() || masks.iter().any(|m| m.len() != voxels) {
                return Err(InputError::MaskShape {
                    which,
                    expected: gates.len(),
                    voxels,
                });
            }
            if let Some(gate) = masks.iter().position(|m| m.iter().any(|&v| v > 1)) {
                return Err(InputError::NonBinary { which, gate });
            }
        }
        if let (Some(en), Some(ep)) = (&endo, &epi) {
            for (gate, (a, b)) in en.iter().zip(ep).enumerate() {
                if a.iter().zip(b).any(|(&i, &o)| i > o) {
                    return Err(InputError::NotNested { gate });
                }
            }
        }
        Ok(Self { side, gates, endo, epi })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn voxels(&self) -> usize {
        self.side * self.side * self.side
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    pub fn gate(&self, t: usize) -> &[f32] {
        &self.gates[t]
    }

    pub fn gates(&self) -> &[Vec<f32>] {
        &self.gates
    }

    pub fn has_masks(&self) -> bool {
        self.endo.is_some() || self.epi.is_some()
    }

    pub fn mask(&self, structure: Structure, t: usize) -> Option<&[u8]> {
        let masks = match structure {
            Structure::Endo => &self.endo,
            Structure::Epi => &self.epi,
        };
        masks.as_ref().map(|m| m[t].as_slice())
    }

    pub fn masks(&self, structure: Structure) -> Option<&[Mask]> {
        match structure {
            Structure::Endo => self.endo.as_deref(),
            Structure::Epi => self.epi.as_deref(),
        }
    }

    /// Same voxels with all masks removed.
    pub fn without_masks(&self) -> Self {
        Self {
            side: self.side,
            gates: self.gates.clone(),
            endo: None,
            epi: None,
        }
    }

    /// `len` consecutive gates starting at `start`, wrapping around the cycle.
    pub fn window(&self, start: usize, len: usize) -> Self {
        fn pick<T: Clone>(v: &[T], start: usize, len: usize) -> Vec<T> {
            (0..len).map(|i| v[(start + i) % v.len()].clone()).collect()
        }
        Self {
            side: self.side,
            gates: pick(&self.gates, start, len),
            endo: self.endo.as_ref().map(|m| pick(m, start, len)),
            epi: self.epi.as_ref().map(|m| pick(m, start, len)),
        }
    }

    /// Replaces voxel data, keeping masks.
    pub fn with_gates(&self, gates: Vec<Vec<f32>>) -> Result<Self, InputError> {
        Self::new(self.side, gates, self.endo.clone(), self.epi.clone())
    }
}

/// Flattens a window into `[N·T, P³]` patch vectors.
///
/// Rows are gate-major, then patch blocks in `(z, y, x)` order; within a
/// patch, voxels are in `(z, y, x)` order.
pub fn patchify(x: &GatedVolumeSequence, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    cfg.validate()?;
    if x.side() != cfg.volume_side || x.gate_count() != cfg.gates {
        return Err(ModelError::InputShape {
            expected: (cfg.volume_side, cfg.gates),
            got: (x.side(), x.gate_count()),
        });
    }
    let (v, p) = (cfg.volume_side, cfg.patch_side);
    let nb = v / p;
    let plen = cfg.patch_len();
    let mut data = Vec::with_capacity(cfg.patches() * cfg.gates * plen);
    for t in 0..cfg.gates {
        let vol = x.gate(t);
        for bz in 0..nb {
            for by in 0..nb {
                for bx in 0..nb {
                    for z in 0..p {
                        for y in 0..p {
                            let row = ((bz * p + z) * v + by * p + y) * v + bx * p;
                            data.extend(vol[row..row + p].iter().map(|&s| s as f64));
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new([cfg.patches() * cfg.gates, plen], data)?)
}

/// Inverse of [`patchify`]: reassembles `T` volumes from patch rows.
pub fn assemble(patches: &Tensor, cfg: &ModelConfig) -> Result<Vec<Vec<f64>>, ModelError> {
    cfg.validate()?;
    let (v, p) = (cfg.volume_side, cfg.patch_side);
    let expected = [cfg.patches() * cfg.gates, cfg.patch_len()];
    if patches.shape() != expected {
        return Err(ModelError::Tensor(crate::autodiff::TensorError::ShapeMismatch {
            op: "assemble",
            left: expected.to_vec(),
            right: patches.shape().to_vec(),
        }));
    }
    let nb = v / p;
    let src = patches.data();
    let mut out = vec![vec![0.0; v * v * v]; cfg.gates];
    let mut k = 0;
    for vol in out.iter_mut() {
        for bz in 0..nb {
            for by in 0..nb {
                for bx in 0..nb {
                    for z in 0..p {
                        for y in 0..p {
                            let row = ((bz * p + z) * v + by * p + y) * v + bx * p;
                            vol[row..row + p].copy_from_slice(&src[k..k + p]);
                            k += p;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean of a voxel field over each patch of one gate, in patch order.
pub fn patch_means(volume: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let (v, p) = (cfg.volume_side, cfg.patch_side);
    let nb = v / p;
    let mut out = Vec::with_capacity(nb * nb * nb);
    for bz in 0..nb {
        for by in 0..nb {
            for bx in 0..nb {
                let mut s = 0.0;
                for z in 0..p {
                    for y in 0..p {
                        let row = ((bz * p + z) * v + by * p + y) * v + bx * p;
                        s += volume[row..row + p].iter().sum::<f64>();
                    }
                }
                out.push(s / cfg.patch_len() as f64);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: usize, p: usize, t: usize) -> ModelConfig {
        ModelConfig {
            volume_side: v,
            patch_side: p,
            gates: t,
            d_model: 8,
            heads: 2,
            blocks: 1,
        }
    }

    fn seq(v: usize, t: usize) -> GatedVolumeSequence {
        let gates = (0..t)
            .map(|g| (0..v * v * v).map(|i| (i * 31 + g * 7) as f32 * 0.25).collect())
            .collect();
        GatedVolumeSequence::new(v, gates, None, None).unwrap()
    }

    #[test]
    fn patch_count_follows_volume_over_patch_cubed() {
        let c = cfg(4, 2, 2);
        let x = patchify(&seq(4, 2), &c).unwrap();
        assert_eq!(c.patches(), 8);
        assert_eq!(x.shape(), &[16, 8]);
    }

    #[test]
    fn whole_volume_patch_is_flattened_gate() {
        let c = cfg(4, 4, 2);
        let s = seq(4, 2);
        let x = patchify(&s, &c).unwrap();
        assert_eq!(x.shape(), &[2, 64]);
        for t in 0..2 {
            let row: Vec<f32> = x.data()[t * 64..(t + 1) * 64].iter().map(|&v| v as f32).collect();
            assert_eq!(row, s.gate(t));
        }
    }

    #[test]
    fn patchify_round_trip_is_bit_exact() {
        let c = cfg(8, 2, 3);
        let s = seq(8, 3);
        let back = assemble(&patchify(&s, &c).unwrap(), &c).unwrap();
        for t in 0..3 {
            let b: Vec<f32> = back[t].iter().map(|&v| v as f32).collect();
            assert_eq!(b, s.gate(t));
        }
    }

    #[test]
    fn indivisible_patch_size_is_rejected() {
        let c = cfg(6, 4, 1);
        assert!(matches!(patchify(&seq(6, 1), &c), Err(ModelError::Config(_))));
    }

    #[test]
    fn window_wraps_around_the_cycle() {
        let s = seq(2, 8);
        let w = s.window(7, 2);
        assert_eq!(w.gate(0), s.gate(7));
        assert_eq!(w.gate(1), s.gate(0));
    }

    #[test]
    fn masks_must_be_binary_and_nested() {
        let n = 8;
        let vol = vec![vec![0.0f32; n]];
        let endo = vec![vec![1u8, 0, 0, 0, 0, 0, 0, 0]];
        let epi = vec![vec![0u8; n]];
        assert_eq!(
            GatedVolumeSequence::new(2, vol.clone(), Some(endo.clone()), Some(epi)).unwrap_err(),
            InputError::NotNested { gate: 0 }
        );
        let bad = vec![vec![2u8; n]];
        assert!(matches!(
            GatedVolumeSequence::new(2, vol.clone(), None, Some(bad)),
            Err(InputError::NonBinary { .. })
        ));
        let nan = vec![vec![f32::NAN; n]];
        assert!(matches!(
            GatedVolumeSequence::new(2, nan, None, None),
            Err(InputError::NonFinite { .. })
        ));
    }
}
