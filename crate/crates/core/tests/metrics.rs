use fedda_core::metrics::{
    boundary_voxels, confusion, metrics_report, overlap_metrics, paired_t_test, summarize, surface_distances,
    MetricCase, MetricsError, CSV_HEADER,
};
use fedda_core::model::Structure;
use proptest::prelude::*;

fn cube(side: usize, f: impl Fn(usize, usize, usize) -> bool) -> Vec<u8> {
    let mut m = Vec::with_capacity(side * side * side);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                m.push(u8::from(f(z, y, x)));
            }
        }
    }
    m
}

fn coords(side: usize, m: &[u8]) -> Vec<[usize; 3]> {
    (0..m.len())
        .filter(|&i| m[i] == 1)
        .map(|i| [i / (side * side), (i / side) % side, i % side])
        .collect()
}

/// Boundary by definition: a foreground voxel with any face neighbor outside
/// the foreground or outside the grid.
fn boundary_oracle(side: usize, m: &[u8]) -> Vec<[usize; 3]> {
    let s = side as isize;
    coords(side, m)
        .into_iter()
        .filter(|c| {
            let [z, y, x] = c.map(|v| v as isize);
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                .iter()
                .any(|(dz, dy, dx)| {
                    let (a, b, d) = (z + dz, y + dy, x + dx);
                    a < 0 || b < 0 || d < 0 || a >= s || b >= s || d >= s || m[((a * s + b) * s + d) as usize] == 0
                })
        })
        .collect()
}

fn dist(a: &[usize; 3], b: &[usize; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum::<f64>().sqrt()
}

/// HD and pooled ASD by comparing every boundary pair.
fn surface_oracle(side: usize, p: &[u8], g: &[u8]) -> (f64, f64) {
    let (bp, bg) = (boundary_oracle(side, p), boundary_oracle(side, g));
    let nearest = |c: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|o| dist(c, o)).fold(f64::INFINITY, f64::min);
    let d: Vec<f64> = bp
        .iter()
        .map(|c| nearest(c, &bg))
        .chain(bg.iter().map(|c| nearest(c, &bp)))
        .collect();
    (
        d.iter().copied().fold(0.0, f64::max),
        d.iter().sum::<f64>() / d.len() as f64,
    )
}

#[test]
fn overlap_on_eight_voxels() {
    let pred = [1, 1, 0, 0, 1, 0, 0, 0];
    let gt = [1, 0, 0, 0, 1, 1, 0, 0];
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 4, 1));
    let o = overlap_metrics(&pred, &gt).unwrap();
    assert!((o.dsc - 4.0 / 6.0).abs() < 1e-15);
    assert!((o.sn - 2.0 / 3.0).abs() < 1e-15);
    assert!((o.sp - 4.0 / 5.0).abs() < 1e-15);
    assert!(!o.degenerate);

    let both_empty = overlap_metrics(&[0; 8], &[0; 8]).unwrap();
    assert_eq!(both_empty.dsc, 1.0);
    assert!(both_empty.degenerate);

    assert_eq!(overlap_metrics(&[0; 8], &[0; 7]), Err(MetricsError::Size(8, 7)));
    assert!(matches!(
        confusion(&[2], &[0]),
        Err(MetricsError::NonBinary { which: "pred", .. })
    ));
}

#[test]
fn solid_cube_boundary_count() {
    let m = cube(5, |z, y, x| {
        (1..4).contains(&z) && (1..4).contains(&y) && (1..4).contains(&x)
    });
    assert_eq!(boundary_voxels(&m).unwrap().len(), 26);
    let full = vec![1u8; 27];
    assert_eq!(boundary_voxels(&full).unwrap().len(), 26);
    assert!(matches!(
        boundary_voxels(&[0; 10]),
        Err(MetricsError::NotCube { len: 10 })
    ));
}

#[test]
fn single_voxel_surface_distances() {
    let a = cube(4, |z, y, x| (z, y, x) == (0, 0, 0));
    let b = cube(4, |z, y, x| (z, y, x) == (0, 0, 3));
    let s = surface_distances(&a, &b).unwrap();
    assert_eq!((s.hd, s.asd), (3.0, 3.0));
    let z = surface_distances(&a, &a).unwrap();
    assert_eq!((z.hd, z.asd), (0.0, 0.0));
    assert_eq!(surface_distances(&[0; 64], &a), Err(MetricsError::EmptyMask("pred")));
}

#[test]
fn t_test_reference_values() {
    // d = [-1, -1, -1, -2, -1]: mean −1.2, sd √0.2, t = −1.2/(√0.2/√5) = −6
    let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 6.0, 6.0]).unwrap();
    assert!((r.t + 6.0).abs() < 1e-12 && r.dof == 4);
    assert!((r.p - 0.003883).abs() < 1e-5, "{}", r.p);

    // d = [-1, -3, -1, -3]: t = −2/(√(4/3)/2) = −√12·... ≈ −3.4641, dof 3, p ≈ 0.0405
    let r = paired_t_test(&[0.0, 0.0, 0.0, 0.0], &[1.0, 3.0, 1.0, 3.0]).unwrap();
    assert!((r.t + 12f64.sqrt()).abs() < 1e-12);
    assert!((r.p - 0.040519).abs() < 1e-4, "{}", r.p);

    let flat = paired_t_test(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
    assert!(flat.degenerate && flat.t.is_nan());
    assert_eq!(paired_t_test(&[1.0], &[2.0]), Err(MetricsError::Samples(1, 1)));
}

#[test]
fn report_skips_undefined_surface_distances() {
    let gt = cube(4, |z, _, _| z < 2);
    let cases = vec![
        MetricCase::compute("a", 0, Structure::Endo, &gt, &gt).unwrap(),
        MetricCase::compute("b", 0, Structure::Endo, &[0; 64], &gt).unwrap(),
        MetricCase::compute("a", 0, Structure::Epi, &gt, &gt).unwrap(),
    ];
    assert_eq!(cases[1].hd, None);
    let (report, csv) = metrics_report(cases);
    let endo = report.summary(Structure::Endo).unwrap();
    assert_eq!(endo.dsc.unwrap().n, 2);
    assert_eq!(endo.hd.unwrap().n, 1);
    assert!((endo.dsc.unwrap().mean - 0.5).abs() < 1e-12);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines[2], "b,0,endo,0.000000,,,0.000000,1.000000");
    assert!(lines.iter().any(|l| l.starts_with("mean,,endo,")));
    assert_eq!(summarize(&[]), None);
    let s = summarize(&[1.0, 3.0]).unwrap();
    assert_eq!((s.mean, s.std), (2.0, 2f64.sqrt()));
}

fn random_mask(side: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::bool::weighted(0.3), side * side * side)
        .prop_map(|v| v.into_iter().map(u8::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn boundary_matches_definition(m in random_mask(5)) {
        let mut got = boundary_voxels(&m).unwrap();
        got.sort();
        prop_assert_eq!(got, boundary_oracle(5, &m));
    }

    #[test]
    fn surface_distances_match_brute_force(p in random_mask(6), g in random_mask(6)) {
        prop_assume!(p.contains(&1) && g.contains(&1));
        let s = surface_distances(&p, &g).unwrap();
        let (hd, asd) = surface_oracle(6, &p, &g);
        prop_assert!((s.hd - hd).abs() < 1e-9);
        prop_assert!((s.asd - asd).abs() < 1e-9);
        let r = surface_distances(&g, &p).unwrap();
        prop_assert!((s.hd - r.hd).abs() < 1e-12 && (s.asd - r.asd).abs() < 1e-12);
    }

    #[test]
    fn overlap_scores_are_bounded(p in random_mask(4), g in random_mask(4)) {
        let o = overlap_metrics(&p, &g).unwrap();
        prop_assert_eq!(o.counts.total(), 64);
        for v in [o.dsc, o.sn, o.sp] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(overlap_metrics(&p, &p).unwrap().dsc, 1.0);
    }

    #[test]
    fn t_test_is_antisymmetric(a in prop::collection::vec(-5.0f64..5.0, 3..10), shift in -1.0f64..1.0) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift + (i as f64) * 0.1).collect();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-9);
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }
}
