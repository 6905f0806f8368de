//! Overlap and surface metrics, paired t-test, and the metrics CSV.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::model::Structure;

pub const CSV_HEADER: &str = "subject,gate,structure,dsc,hd,asd,sn,sp";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("masks differ in size: {0} vs {1}")]
    Size(usize, usize),
    #[error("{which} mask is not binary at voxel {index}")]
    NonBinary { which: &'static str, index: usize },
    #[error("{0} mask is empty: surface distance undefined")]
    EmptyMask(&'static str),
    #[error("mask length {len} is not a cube")]
    NotCube { len: usize },
    #[error("paired samples need equal lengths ≥ 2, got {0} and {1}")]
    Samples(usize, usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dsc: f64,
    pub sn: f64,
    pub sp: f64,
    pub counts: ConfusionCounts,
    /// at least one ratio had an empty denominator and was set to 1
    pub degenerate: bool,
}

fn check_binary(which: &'static str, m: &[u8]) -> Result<(), MetricsError> {
    match m.iter().position(|&v| v > 1) {
        Some(index) => Err(MetricsError::NonBinary { which, index }),
        None => Ok(()),
    }
}

fn check_pair(pred: &[u8], gt: &[u8]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Size(pred.len(), gt.len()));
    }
    check_binary("pred", pred)?;
    check_binary("gt", gt)
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// DSC, sensitivity and specificity. Empty denominators give 1.0 and set
/// the degenerate flag.
pub fn overlap_metrics(pred: &[u8], gt: &[u8]) -> Result<OverlapMetrics, MetricsError> {
    let c = confusion(pred, gt)?;
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let sn = ratio(c.tp, c.tp + c.fn_);
    let sp = ratio(c.tn, c.tn + c.fp);
    Ok(OverlapMetrics {
        dsc,
        sn,
        sp,
        counts: c,
        degenerate,
    })
}

fn cube_side(len: usize) -> Result<usize, MetricsError> {
    let v = (len as f64).cbrt().round() as usize;
    if v * v * v == len {
        Ok(v)
    } else {
        Err(MetricsError::NotCube { len })
    }
}

/// Foreground voxels `(z, y, x)` with a 6-neighbor in background or outside.
pub fn boundary_voxels(mask: &[u8]) -> Result<Vec<[usize; 3]>, MetricsError> {
    check_binary("mask", mask)?;
    let v = cube_side(mask.len())?;
    let at = |z: usize, y: usize, x: usize| mask[(z * v + y) * v + x] == 1;
    let mut out = Vec::new();
    for z in 0..v {
        for y in 0..v {
            for x in 0..v {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == v || y + 1 == v || x + 1 == v;
                if edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    Ok(out)
}

const FAR: f64 = 1e30;

/// 1-D squared distance transform by lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] >= FAR {
            continue;
        }
        if f[v[0]] >= FAR {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: q dominates entirely
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if f[v[0]] >= FAR {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest site of a `side³` grid.
pub fn squared_distance_transform(sites: &[[usize; 3]], side: usize) -> Vec<f64> {
    let n = side;
    let mut grid = vec![FAR; n * n * n];
    for &[z, y, x] in sites {
        grid[(z * n + y) * n + x] = 0.0;
    }
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut zz) = (vec![0usize; n], vec![0.0; n + 1]);
    for stride in [1, n, n * n] {
        for base in 0..n * n * n {
            if (base / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = grid[base + i * stride];
            }
            edt_1d(&f, &mut out, &mut v, &mut zz);
            for i in 0..n {
                grid[base + i * stride] = out[i];
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    /// symmetric Hausdorff distance, voxels
    pub hd: f64,
    /// mean over both directed nearest-distance lists, voxels
    pub asd: f64,
}

/// HD and ASD between the 6-connected boundaries of two masks.
pub fn surface_distances(pred: &[u8], gt: &[u8]) -> Result<SurfaceDistances, MetricsError> {
    check_pair(pred, gt)?;
    let side = cube_side(pred.len())?;
    let bp = boundary_voxels(pred)?;
    let bg = boundary_voxels(gt)?;
    if bp.is_empty() {
        return Err(MetricsError::EmptyMask("pred"));
    }
    if bg.is_empty() {
        return Err(MetricsError::EmptyMask("gt"));
    }
    let dp = squared_distance_transform(&bp, side);
    let dg = squared_distance_transform(&bg, side);
    let idx = |c: &[usize; 3]| (c[0] * side + c[1]) * side + c[2];
    let mut hd: f64 = 0.0;
    let mut sum = 0.0;
    for (from, to) in [(&bp, &dg), (&bg, &dp)] {
        for c in from {
            let d = to[idx(c)].sqrt();
            hd = hd.max(d);
            sum += d;
        }
    }
    Ok(SurfaceDistances {
        hd,
        asd: sum / (bp.len() + bg.len()) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// two-sided
    pub p: f64,
    pub dof: usize,
    /// zero variance of the differences; `t` and `p` are NaN
    pub degenerate: bool,
}

/// Classic paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::Samples(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dof = a.len() - 1;
    if var <= 0.0 {
        return Ok(TTest {
            t: f64::NAN,
            p: f64::NAN,
            dof,
            degenerate: true,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("dof ≥ 1");
    Ok(TTest {
        t,
        p: 2.0 * (1.0 - dist.cdf(t.abs())),
        dof,
        degenerate: false,
    })
}

/// Metrics of one (subject, gate, structure) prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCase {
    pub subject: String,
    pub gate: usize,
    pub structure: Structure,
    pub dsc: f64,
    /// `None` when either mask is empty
    pub hd: Option<f64>,
    pub asd: Option<f64>,
    pub sn: f64,
    pub sp: f64,
}

impl MetricCase {
    pub fn compute(
        subject: &str,
        gate: usize,
        structure: Structure,
        pred: &[u8],
        gt: &[u8],
    ) -> Result<Self, MetricsError> {
        let o = overlap_metrics(pred, gt)?;
        let s = match surface_distances(pred, gt) {
            Ok(s) => Some(s),
            Err(MetricsError::EmptyMask(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            subject: subject.to_string(),
            gate,
            structure,
            dsc: o.dsc,
            hd: s.map(|s| s.hd),
            asd: s.map(|s| s.asd),
            sn: o.sn,
            sp: o.sp,
        })
    }
}

/// Mean and sample standard deviation of one column; `None` if no values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(Summary {
        mean,
        std,
        n: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub structure: Structure,
    pub dsc: Option<Summary>,
    pub hd: Option<Summary>,
    pub asd: Option<Summary>,
    pub sn: Option<Summary>,
    pub sp: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<MetricCase>,
    pub aggregates: Vec<StructureSummary>,
}

impl MetricsReport {
    pub fn summary(&self, structure: Structure) -> Option<&StructureSummary> {
        self.aggregates.iter().find(|a| a.structure == structure)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Builds per-structure aggregates (cases with undefined HD/ASD are left out
/// of those two columns) and renders the CSV.
pub fn metrics_report(cases: Vec<MetricCase>) -> (MetricsReport, String) {
    let mut aggregates = Vec::new();
    for s in [Structure::Endo, Structure::Epi] {
        let sel: Vec<&MetricCase> = cases.iter().filter(|c| c.structure == s).collect();
        if sel.is_empty() {
            continue;
        }
        let col =
            |f: &dyn Fn(&MetricCase) -> Option<f64>| summarize(&sel.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
        aggregates.push(StructureSummary {
            structure: s,
            dsc: col(&|c| Some(c.dsc)),
            hd: col(&|c| c.hd),
            asd: col(&|c| c.asd),
            sn: col(&|c| Some(c.sn)),
            sp: col(&|c| Some(c.sp)),
        });
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for c in &cases {
        csv.push_str(&format!(
            "{},{},{},{:.6},{},{},{:.6},{:.6}\n",
            c.subject,
            c.gate,
            c.structure,
            c.dsc,
            opt(c.hd),
            opt(c.asd),
            c.sn,
            c.sp
        ));
    }
    for a in &aggregates {
        for (label, pick) in [("mean", true), ("std", false)] {
            let f = |s: Option<Summary>| opt(s.map(|s| if pick { s.mean } else { s.std }));
            csv.push_str(&format!(
                "{label},,{},{},{},{},{},{}\n",
                a.structure,
                f(a.dsc),
                f(a.hd),
                f(a.asd),
                f(a.sn),
                f(a.sp)
            ));
        }
    }
    (MetricsReport { cases, aggregates }, csv)
}
