//! Synthetic gated left-ventricle phantoms, per-site intensity shift,
//! site-stratified subject folds, and the on-disk volume format.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GatedVolumeSequence, InputError, Mask};

pub const VOLUME_MAGIC: &[u8; 4] = b"FDTS";
pub const VOLUME_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "subject\tsite\tlabeled\tpath";

/// Long-axis slice count and in-plane size of the slicing op.
pub const SLICE_COUNT: usize = 32;
pub const SLICE_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid phantom parameters: {0}")]
    Params(String),
    #[error("mask for {which} is empty at gate {gate}")]
    EmptyMask { which: &'static str, gate: usize },
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}")]
    Magic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: file is {len} bytes, expected {expected}")]
    Length { path: PathBuf, len: usize, expected: usize },
    #[error("{path}: non-cubic volume {dims:?}")]
    Dims { path: PathBuf, dims: [u32; 3] },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
    #[error("long-axis slicing needs a {SLICE_SIDE}³ volume, got side {0}")]
    SliceSide(usize),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── phantom ─────────────────────────────────────────────────────────

/// Geometry and intensities of one gated ellipsoidal shell.
///
/// Coordinates are `(x, y, z)` in voxels; `z` is the long axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub side: usize,
    pub center: [f64; 3],
    pub epi_radii: [f64; 3],
    pub wall_thickness: f64,
    /// fractional radius reduction at peak contraction, in `[0, 1)`
    pub amplitude: f64,
    pub gates: usize,
    pub myocardium: f64,
    pub background: f64,
    pub noise_std: f64,
}

impl PhantomParams {
    /// Default geometry scaled to a `side³` grid.
    pub fn for_side(side: usize) -> Self {
        let s = side as f64;
        let c = (s - 1.0) / 2.0;
        Self {
            side,
            center: [c, c, c],
            epi_radii: [0.3 * s, 0.3 * s, 0.38 * s],
            wall_thickness: 0.1 * s,
            amplitude: 0.25,
            gates: 8,
            myocardium: 1.0,
            background: 0.1,
            noise_std: 0.05,
        }
    }

    /// Radius scale at gate `t`; systole falls at mid-cycle.
    pub fn contraction(&self, t: usize) -> f64 {
        let phase = 2.0 * PI * (t % self.gates) as f64 / self.gates as f64;
        1.0 - self.amplitude * (1.0 - phase.cos()) / 2.0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Params(m));
        if self.side == 0 || self.gates == 0 {
            return fail("side and gates must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.amplitude) {
            return fail(format!("amplitude {} outside [0, 1)", self.amplitude));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        let all = self.center.iter().chain(&self.epi_radii);
        if all
            .chain([&self.wall_thickness, &self.myocardium, &self.background])
            .any(|v| !v.is_finite())
        {
            return fail("non-finite geometry or intensity".into());
        }
        let min_scale = 1.0 - self.amplitude;
        for r in self.epi_radii {
            if r * min_scale - self.wall_thickness <= 0.0 {
                return fail(format!(
                    "inner radius {:.3} vanishes at peak contraction",
                    r * min_scale - self.wall_thickness
                ));
            }
        }
        Ok(())
    }
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0
}

/// Renders a phantom with endocardial and epicardial masks at every gate.
pub fn generate_phantom(p: &PhantomParams, seed: u64) -> Result<GatedVolumeSequence, DataError> {
    p.validate()?;
    let v = p.side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, p.noise_std).map_err(|e| DataError::Params(e.to_string()))?;
    let mut gates = Vec::with_capacity(p.gates);
    let mut endo = Vec::with_capacity(p.gates);
    let mut epi = Vec::with_capacity(p.gates);
    for t in 0..p.gates {
        let s = p.contraction(t);
        let outer = p.epi_radii.map(|r| r * s);
        let inner = outer.map(|r| r - p.wall_thickness);
        let mut vol = Vec::with_capacity(v * v * v);
        let mut en: Mask = Vec::with_capacity(v * v * v);
        let mut ep: Mask = Vec::with_capacity(v * v * v);
        for z in 0..v {
            for y in 0..v {
                for x in 0..v {
                    let pos = [x as f64, y as f64, z as f64];
                    let o = inside(pos, p.center, outer);
                    let i = inside(pos, p.center, inner);
                    let base = if o && !i { p.myocardium } else { p.background };
                    let n = if p.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    vol.push((base + n) as f32);
                    en.push(u8::from(i));
                    ep.push(u8::from(o));
                }
            }
        }
        for (which, m) in [("endo", &en), ("epi", &ep)] {
            if !m.contains(&1) {
                return Err(DataError::EmptyMask { which, gate: t });
            }
        }
        gates.push(vol);
        endo.push(en);
        epi.push(ep);
    }
    Ok(GatedVolumeSequence::new(v, gates, Some(endo), Some(epi))?)
}

// ── site shift ──────────────────────────────────────────────────────

/// Scanner-like intensity perturbation of one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteShift {
    pub gain: f64,
    pub offset: f64,
    /// box blur half-width in voxels
    pub blur: usize,
    /// std of extra Gaussian noise, in intensity units
    pub noise: f64,
}

impl Default for SiteShift {
    fn default() -> Self {
        Self {
            gain: 1.0,
            offset: 0.0,
            blur: 0,
            noise: 0.0,
        }
    }
}

impl SiteShift {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(DataError::Params(format!("site gain {} must be positive", self.gain)));
        }
        if !self.offset.is_finite() || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::Params("site offset/noise must be finite, noise ≥ 0".into()));
        }
        Ok(())
    }
}

/// Default shifts for the three desk-scale sites.
pub fn default_shifts() -> Vec<SiteShift> {
    vec![
        SiteShift::default(),
        SiteShift {
            gain: 1.3,
            offset: 0.05,
            blur: 1,
            noise: 0.02,
        },
        SiteShift {
            gain: 0.8,
            offset: -0.05,
            blur: 0,
            noise: 0.05,
        },
    ]
}

/// Mean over a `(2r+1)³` box, clipped at the volume border.
fn box_blur(vol: &[f64], v: usize, r: usize) -> Vec<f64> {
    let mut cur = vol.to_vec();
    // separable: one pass per axis
    for stride in [1, v, v * v] {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let coord = (i / stride) % v;
            let lo = coord.saturating_sub(r);
            let hi = (coord + r).min(v - 1);
            let base = i - coord * stride;
            let s: f64 = (lo..=hi).map(|c| cur[base + c * stride]).sum();
            *out = s / (hi - lo + 1) as f64;
        }
        cur = next;
    }
    cur
}

/// `gain·x + offset`, then box blur, then extra noise. Masks are untouched.
pub fn apply_site_shift(x: &GatedVolumeSequence, s: &SiteShift, seed: u64) -> Result<GatedVolumeSequence, DataError> {
    s.validate()?;
    let v = x.side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, s.noise).map_err(|e| DataError::Params(e.to_string()))?;
    let gates = x
        .gates()
        .iter()
        .map(|g| {
            let mut vol: Vec<f64> = g.iter().map(|&a| s.gain * a as f64 + s.offset).collect();
            if s.blur > 0 {
                vol = box_blur(&vol, v, s.blur);
            }
            vol.into_iter()
                .map(|a| {
                    let n = if s.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (a + n) as f32
                })
                .collect()
        })
        .collect();
    Ok(x.with_gates(gates)?)
}

// ── sites ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub sequence: GatedVolumeSequence,
}

/// The subjects held by one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub id: String,
    pub subjects: Vec<Subject>,
    pub labeled: bool,
}

impl SiteDataset {
    /// Copy with every mask removed, as seen by training code at a target site.
    pub fn unlabeled(&self) -> Self {
        Self {
            id: self.id.clone(),
            subjects: self
                .subjects
                .iter()
                .map(|s| Subject {
                    id: s.id.clone(),
                    sequence: s.sequence.without_masks(),
                })
                .collect(),
            labeled: false,
        }
    }

    /// One window per (subject, start gate).
    pub fn window_count(&self) -> usize {
        self.subjects.iter().map(|s| s.sequence.gate_count()).sum()
    }

    /// Window `index` of `len` gates; windows are ordered by subject, then start gate.
    pub fn window(&self, mut index: usize, len: usize) -> GatedVolumeSequence {
        for s in &self.subjects {
            let g = s.sequence.gate_count();
            if index < g {
                return s.sequence.window(index, len);
            }
            index -= g;
        }
        panic!("window index out of range");
    }

    pub fn with_subjects(&self, keep: &dyn Fn(&Subject) -> bool) -> Self {
        Self {
            id: self.id.clone(),
            subjects: self.subjects.iter().filter(|s| keep(s)).cloned().collect(),
            labeled: self.labeled,
        }
    }
}

pub fn site_id(s: usize) -> String {
    format!("site-{s}")
}

pub fn subject_id(s: usize, i: usize) -> String {
    format!("site-{s}-subj-{i}")
}

/// Desk-scale site sizes.
pub const DESK_SITES: [usize; 3] = [12, 5, 8];

fn jitter(base: &PhantomParams, rng: &mut ChaCha8Rng) -> PhantomParams {
    let s = base.side as f64;
    let mut p = *base;
    for c in p.center.iter_mut() {
        *c += rng.random_range(-0.04..=0.04) * s;
    }
    for r in p.epi_radii.iter_mut() {
        *r *= rng.random_range(0.9..=1.1);
    }
    p.wall_thickness *= rng.random_range(0.85..=1.15);
    p.amplitude = (p.amplitude + rng.random_range(-0.05..=0.05)).clamp(0.0, 0.9);
    p.myocardium *= rng.random_range(0.85..=1.15);
    p
}

/// Generates `sizes[s]` jittered subjects per site and applies `shifts[s]`.
pub fn build_sites(
    sizes: &[usize],
    shifts: &[SiteShift],
    params: &PhantomParams,
    seed: u64,
) -> Result<Vec<SiteDataset>, DataError> {
    if sizes.len() != shifts.len() {
        return Err(DataError::Params(format!(
            "{} site sizes but {} shifts",
            sizes.len(),
            shifts.len()
        )));
    }
    if let Some(s) = sizes.iter().position(|&n| n == 0) {
        return Err(DataError::Params(format!("site {s} has no subjects")));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites = Vec::with_capacity(sizes.len());
    for (s, (&n, shift)) in sizes.iter().zip(shifts).enumerate() {
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = jitter(params, &mut rng);
            // keep jittered geometry inside the validity region
            p.wall_thickness = p
                .wall_thickness
                .min(0.9 * p.epi_radii.iter().fold(f64::MAX, |a, &b| a.min(b)) * (1.0 - p.amplitude));
            let (phantom_seed, shift_seed) = (rng.random(), rng.random());
            let seq = generate_phantom(&p, phantom_seed)?;
            subjects.push(Subject {
                id: subject_id(s, i),
                sequence: apply_site_shift(&seq, shift, shift_seed)?,
            });
        }
        sites.push(SiteDataset {
            id: site_id(s),
            subjects,
            labeled: true,
        });
    }
    Ok(sites)
}

// ── folds ───────────────────────────────────────────────────────────

/// `k` disjoint test folds of subject ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Every subject outside test fold `fold`.
    pub fn train(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Site-stratified subject-level folds.
///
/// Each site's subjects are shuffled and dealt round-robin; the dealing
/// position carries over between sites so fold totals stay balanced.
pub fn kfold_split(subjects: &[(String, String)], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::Split(format!("k = {k}: need at least 2 folds")));
    }
    let mut seen = HashSet::new();
    let mut by_site: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (site, id) in subjects {
        if !seen.insert(id.as_str()) {
            return Err(DataError::DuplicateSubject(id.clone()));
        }
        by_site.entry(site).or_default().push(id);
    }
    if let Some((site, ids)) = by_site.iter().find(|(_, ids)| ids.len() < k) {
        return Err(DataError::Split(format!(
            "site {site} has {} subjects, fewer than k = {k}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for ids in by_site.values_mut() {
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            folds[next].push(id.to_string());
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { folds })
}

// ── persistence ─────────────────────────────────────────────────────

/// Encodes one subject in the FDTS layout. Absent masks are written as zeros.
pub fn encode_volume(seq: &GatedVolumeSequence) -> Vec<u8> {
    let (v, n, g) = (seq.side(), seq.voxels(), seq.gate_count());
    let mut out = Vec::with_capacity(20 + g * n * 6);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for _ in 0..3 {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(g as u32).to_le_bytes());
    for gate in seq.gates() {
        for x in gate {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for s in [crate::model::Structure::Endo, crate::model::Structure::Epi] {
        match seq.masks(s) {
            Some(masks) => masks.iter().for_each(|m| out.extend_from_slice(m)),
            None => out.resize(out.len() + g * n, 0),
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<GatedVolumeSequence, DataError> {
    let length = |expected| DataError::Length {
        path: path.to_path_buf(),
        len: bytes.len(),
        expected,
    };
    if bytes.len() < 24 {
        return Err(length(24));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(DataError::Magic {
            path: path.to_path_buf(),
            found: bytes[..4].to_vec(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VOLUME_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let dims = [word(1), word(2), word(3)];
    if dims[0] != dims[1] || dims[1] != dims[2] {
        return Err(DataError::Dims {
            path: path.to_path_buf(),
            dims,
        });
    }
    let (v, g) = (dims[0] as usize, word(4) as usize);
    let n = v * v * v;
    let expected = 24 + g * n * 4 + 2 * g * n;
    if bytes.len() != expected {
        return Err(length(expected));
    }
    let mut pos = 24;
    let gates = (0..g)
        .map(|_| {
            let vol = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            vol
        })
        .collect();
    let mut masks = [Vec::with_capacity(g), Vec::with_capacity(g)];
    for block in masks.iter_mut() {
        for _ in 0..g {
            block.push(bytes[pos..pos + n].to_vec());
            pos += n;
        }
    }
    let [endo, epi] = masks;
    Ok(GatedVolumeSequence::new(v, gates, Some(endo), Some(epi))?)
}

/// Writes one `<subject>.fdts` file per subject plus a manifest into `dir`.
pub fn save_dataset(dir: &Path, sites: &[SiteDataset]) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for site in sites {
        for s in &site.subjects {
            let file = format!("{}.fdts", s.id);
            let path = dir.join(&file);
            fs::write(&path, encode_volume(&s.sequence)).map_err(io_err(&path))?;
            manifest.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, site.id, site.labeled, file));
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub subject: String,
    pub site: String,
    pub labeled: bool,
    pub path: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, DataError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') || (i == 0 && line == MANIFEST_HEADER) {
            continue;
        }
        let bad = |msg: String| DataError::Manifest { line: i + 1, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        let [subject, site, labeled, path] = cols[..] else {
            return Err(bad(format!("expected 4 tab-separated columns, got {}", cols.len())));
        };
        let labeled = labeled
            .parse::<bool>()
            .map_err(|_| bad(format!("labeled flag `{labeled}` is not true/false")))?;
        if !seen.insert(subject.to_string()) {
            return Err(DataError::DuplicateSubject(subject.to_string()));
        }
        out.push(ManifestEntry {
            subject: subject.into(),
            site: site.into(),
            labeled,
            path: path.into(),
        });
    }
    Ok(out)
}

/// Loads sites from `manifest` (or `dir/manifest.tsv`), in first-seen site order.
pub fn load_dataset(path: &Path) -> Result<Vec<SiteDataset>, DataError> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let mut sites: Vec<SiteDataset> = Vec::new();
    for e in parse_manifest(&text)? {
        let file = dir.join(&e.path);
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        let subject = Subject {
            id: e.subject,
            sequence: decode_volume(&bytes, &file)?,
        };
        match sites.iter_mut().find(|s| s.id == e.site) {
            Some(site) => site.subjects.push(subject),
            None => sites.push(SiteDataset {
                id: e.site,
                subjects: vec![subject],
                labeled: e.labeled,
            }),
        }
    }
    Ok(sites)
}

// ── long-axis slicing ───────────────────────────────────────────────

/// 32 planes containing the long (`z`) axis at 11.25° steps, nearest-neighbor
/// sampled, each `[z][u]` with `u` the in-plane radial coordinate.
pub fn long_axis_slices(volume: &[f64], side: usize) -> Result<Vec<Vec<f64>>, DataError> {
    if side != SLICE_SIDE || volume.len() != side * side * side {
        return Err(DataError::SliceSide(side));
    }
    let c = (side / 2) as f64;
    let mut slices = Vec::with_capacity(SLICE_COUNT);
    for k in 0..SLICE_COUNT {
        let theta = 2.0 * PI * k as f64 / SLICE_COUNT as f64;
        let (sin, cos) = theta.sin_cos();
        let mut img = vec![0.0; side * SLICE_SIDE];
        for u in 0..SLICE_SIDE {
            let r = u as f64 - c;
            let x = (c + r * cos).round();
            let y = (c + r * sin).round();
            if x < 0.0 || y < 0.0 || x >= side as f64 || y >= side as f64 {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            for z in 0..side {
                img[z * SLICE_SIDE + u] = volume[(z * side + y) * side + x];
            }
        }
        slices.push(img);
    }
    Ok(slices)
}

/// Nearest-neighbor inverse of [`long_axis_slices`]: each voxel reads the
/// slice closest to its azimuth at its radial distance.
pub fn volume_from_slices(slices: &[Vec<f64>]) -> Result<Vec<f64>, DataError> {
    let side = SLICE_SIDE;
    if slices.len() != SLICE_COUNT || slices.iter().any(|s| s.len() != side * SLICE_SIDE) {
        return Err(DataError::SliceSide(slices.first().map_or(0, |s| s.len())));
    }
    let c = (side / 2) as f64;
    let step = 2.0 * PI / SLICE_COUNT as f64;
    let mut out = vec![0.0; side * side * side];
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let r = dx.hypot(dy);
            let k = ((dy.atan2(dx).rem_euclid(2.0 * PI) / step).round() as usize) % SLICE_COUNT;
            let u = (c + r).round() as usize;
            if u >= SLICE_SIDE {
                continue;
            }
            for z in 0..side {
                out[(z * side + y) * side + x] = slices[k][z * SLICE_SIDE + u];
            }
        }
    }
    Ok(out)
}
