use fedda_core::autodiff::{Tape, Tensor};
use fedda_core::losses::{
    attention_consistency_loss, class_weights, dice_loss, dice_value, gaussian_kernel, lmmd_loss, total_loss,
    total_on_tape, KernelSpec, LossError, LossWeights, BANDWIDTH_MULTIPLIERS,
};
use fedda_core::model::AttentionMaps;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ── oracles ─────────────────────────────────────────────────────────

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of squared distances over all distinct pooled pairs, by sorting.
fn median_oracle(rows: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(&rows[i], &rows[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn k_oracle(a: &[f64], b: &[f64], bw: &[f64]) -> f64 {
    let r = sq_dist(a, b);
    bw.iter().map(|s| (-r / s).exp()).sum()
}

/// Every term of the class-conditional expansion written out as explicit
/// double sums over samples.
fn lmmd_oracle(zs: &[Vec<f64>], ys: &[Vec<f64>], zt: &[Vec<f64>], yt: &[Vec<f64>], bw: &[f64]) -> Option<f64> {
    let classes = ys[0].len();
    let mut total = 0.0;
    let mut active = 0;
    for c in 0..classes {
        let ms: f64 = ys.iter().map(|y| y[c]).sum();
        let mt: f64 = yt.iter().map(|y| y[c]).sum();
        if ms <= 0.0 || mt <= 0.0 {
            continue;
        }
        active += 1;
        let mut ss = 0.0;
        for i in 0..zs.len() {
            for j in 0..zs.len() {
                ss += ys[i][c] / ms * ys[j][c] / ms * k_oracle(&zs[i], &zs[j], bw);
            }
        }
        let mut tt = 0.0;
        for i in 0..zt.len() {
            for j in 0..zt.len() {
                tt += yt[i][c] / mt * yt[j][c] / mt * k_oracle(&zt[i], &zt[j], bw);
            }
        }
        let mut st = 0.0;
        for i in 0..zs.len() {
            for j in 0..zt.len() {
                st += ys[i][c] / ms * yt[j][c] / mt * k_oracle(&zs[i], &zt[j], bw);
            }
        }
        total += ss + tt - 2.0 * st;
    }
    (active > 0).then(|| total / active as f64)
}

fn flat(rows: &[Vec<f64>]) -> Tensor {
    t(&[rows.len(), rows[0].len()], rows.concat())
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect())
        .collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn maps(heads: usize, n: usize, g: usize, f: impl Fn(usize) -> f64) -> AttentionMaps {
    AttentionMaps {
        temporal: Tensor::from_fn([heads, n, g, g + 1], &f),
        spatial: Tensor::from_fn([heads, g, n, n + 1], |i| f(i + 1000)),
    }
}

// ── dice ────────────────────────────────────────────────────────────

#[test]
fn dice_examples() {
    let mask: Vec<u8> = (0..32768).map(|i| u8::from(i % 2 == 0)).collect();
    let exact: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
    assert!(dice_value(&exact, &mask).unwrap().abs() < 1e-12);

    let half = vec![0.5; mask.len()];
    assert!((dice_value(&half, &mask).unwrap() - 0.5).abs() < 1e-4);

    let empty = vec![0u8; 4096];
    let tiny = vec![1e-9; 4096];
    assert!(dice_value(&tiny, &empty).unwrap() < 1e-5);

    assert!(matches!(
        dice_value(&[0.5, 0.5], &[1, 2]),
        Err(LossError::NonBinaryMask(1))
    ));

    let mut tape = Tape::new();
    let p = tape.constant(t(&[2, 2, 2], vec![0.2, 0.9, 0.4, 0.7, 0.1, 0.5, 0.6, 0.3]));
    let m = [0, 1, 1, 1, 0, 0, 1, 0];
    let l = dice_loss(&mut tape, p, &m).unwrap();
    let v = dice_value(tape.value(p).data(), &m).unwrap();
    assert_eq!(tape.value(l).item(), v);
    // (2·2.6 + 1) / (3.7 + 4 + 1)
    assert!((v - (1.0 - 6.2 / 8.7)).abs() < 1e-12);
}

// ── attention consistency ───────────────────────────────────────────

#[test]
fn attention_consistency_examples() {
    let a = maps(2, 4, 2, |i| (i % 7) as f64 / 7.0);
    let z = attention_consistency_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
    assert_eq!((z.time, z.space, z.total), (0.0, 0.0, 0.0));

    let shifted = AttentionMaps {
        temporal: a.temporal.map(|v| v + 0.1),
        spatial: a.spatial.clone(),
    };
    let l = attention_consistency_loss(std::slice::from_ref(&shifted), std::slice::from_ref(&a)).unwrap();
    assert!((l.time - 0.1).abs() < 1e-12 && l.space == 0.0 && (l.total - 0.1).abs() < 1e-12);
    let r = attention_consistency_loss(std::slice::from_ref(&a), &[shifted]).unwrap();
    assert_eq!(l, r);

    // batch sizes may differ; maps are averaged first
    let b = maps(2, 4, 2, |i| (i % 5) as f64 / 5.0);
    let avg = AttentionMaps::mean(&[a.clone(), b.clone()]).unwrap();
    let two = attention_consistency_loss(&[a.clone(), b], std::slice::from_ref(&a)).unwrap();
    let one = attention_consistency_loss(&[avg], std::slice::from_ref(&a)).unwrap();
    assert!((two.total - one.total).abs() < 1e-15);

    let other = maps(2, 8, 2, |_| 0.5);
    assert!(matches!(
        attention_consistency_loss(&[a], &[other]),
        Err(LossError::MapMismatch(_))
    ));
}

// ── class weights and kernels ───────────────────────────────────────

#[test]
fn class_weight_examples() {
    let w = class_weights(&t(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0])).unwrap();
    assert_eq!(w.class(0), &[0.5, 0.0, 0.5]);
    assert_eq!(w.class(1), &[0.0, 1.0, 0.0]);

    let u = class_weights(&t(&[4, 2], vec![0.5; 8])).unwrap();
    assert!(u.class(0).iter().chain(u.class(1)).all(|&v| v == 0.25));

    let single = class_weights(&t(&[1, 2], vec![0.3, 0.7])).unwrap();
    assert_eq!((single.class(0), single.class(1)), (&[1.0][..], &[1.0][..]));

    let empty = class_weights(&t(&[2, 2], vec![1.0, 0.0, 1.0, 0.0])).unwrap();
    assert!(!empty.has_mass(1) && empty.class(1) == [0.0, 0.0]);

    assert!(matches!(
        class_weights(&t(&[1, 2], vec![-0.1, 1.0])),
        Err(LossError::NegativeLabel { .. })
    ));
}

#[test]
fn kernel_examples() {
    let p = t(&[1, 3], vec![0.2, -1.0, 4.0]);
    let k = gaussian_kernel(&p, &p, &KernelSpec::default()).unwrap();
    assert_eq!(k.item_or_first(), 5.0);

    let a = t(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]);
    let k = gaussian_kernel(&a, &a, &KernelSpec::Fixed(vec![10.0])).unwrap();
    assert!((k.data()[1] - (-25.0f64 / 10.0).exp()).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = flat(&random_rows(&mut rng, 4, 3, 1.0));
    let y = flat(&random_rows(&mut rng, 6, 3, 1.0));
    let spec = KernelSpec::Fixed(vec![0.3, 1.0, 2.5]);
    let kxy = gaussian_kernel(&x, &y, &spec).unwrap();
    let kyx = gaussian_kernel(&y, &x, &spec).unwrap();
    for i in 0..4 {
        for j in 0..6 {
            assert!((kxy.data()[i * 6 + j] - kyx.data()[j * 4 + i]).abs() < 1e-15);
        }
    }

    // identical features: zero median falls back to a unit base
    let same = t(&[3, 2], vec![1.0; 6]);
    assert_eq!(
        KernelSpec::default().bandwidths(&same, &same),
        BANDWIDTH_MULTIPLIERS.to_vec()
    );

    assert!(gaussian_kernel(&x, &t(&[2, 2], vec![0.0; 4]), &spec).is_err());
}

trait FirstValue {
    fn item_or_first(&self) -> f64;
}

impl FirstValue for Tensor {
    fn item_or_first(&self) -> f64 {
        self.data()[0]
    }
}

// ── LMMD ────────────────────────────────────────────────────────────

#[test]
fn lmmd_small_case_matches_explicit_expansion() {
    // two source and two target points, one class, one bandwidth
    let zs = vec![vec![0.0, 1.0], vec![1.0, -0.5]];
    let zt = vec![vec![2.0, 0.0], vec![-1.0, 1.5]];
    let ys = vec![vec![0.25], vec![0.75]];
    let yt = vec![vec![0.6], vec![0.4]];
    let bw = [1.7];
    let got = lmmd_loss(
        &flat(&zs),
        &flat(&ys),
        &flat(&zt),
        &flat(&yt),
        &KernelSpec::Fixed(bw.to_vec()),
    )
    .unwrap();
    let want = lmmd_oracle(&zs, &ys, &zt, &yt, &bw).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn lmmd_identical_sides_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = random_rows(&mut rng, 6, 4, 2.0);
    let y = random_labels(&mut rng, 6, 2);
    let v = lmmd_loss(&flat(&z), &flat(&y), &flat(&z), &flat(&y), &KernelSpec::default()).unwrap();
    assert!(v.abs() < 1e-9);
}

#[test]
fn lmmd_without_shared_mass_is_an_error() {
    let z = t(&[2, 1], vec![0.0, 1.0]);
    let ys = t(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
    let yt = t(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]);
    assert!(matches!(
        lmmd_loss(&z, &ys, &z, &yt, &KernelSpec::default()),
        Err(LossError::NoClassMass)
    ));
}

#[test]
fn lmmd_matches_brute_force_on_random_micro_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (ns, nt) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let d = rng.random_range(1..=4);
        let c = rng.random_range(1..=3);
        let zs = random_rows(&mut rng, ns, d, 1.5);
        let zt = random_rows(&mut rng, nt, d, 1.5);
        let ys = random_labels(&mut rng, ns, c);
        let yt = random_labels(&mut rng, nt, c);
        let pooled: Vec<Vec<f64>> = zs.iter().chain(&zt).cloned().collect();
        let median = median_oracle(&pooled);
        let bw: Vec<f64> = BANDWIDTH_MULTIPLIERS.iter().map(|m| m * median).collect();
        let got = lmmd_loss(&flat(&zs), &flat(&ys), &flat(&zt), &flat(&yt), &KernelSpec::default()).unwrap();
        let want = lmmd_oracle(&zs, &ys, &zt, &yt, &bw).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

// ── combination ─────────────────────────────────────────────────────

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!((w.alpha_att, w.beta_lmmd), (0.01, 100.0));
    assert!((total_loss(0.5, 0.1, 0.001, w).unwrap() - 0.601).abs() < 1e-12);
    let none = LossWeights {
        alpha_att: 0.0,
        beta_lmmd: 0.0,
    };
    assert_eq!(total_loss(0.37, 5.0, 2.0, none).unwrap(), 0.37);
    assert!(matches!(
        total_loss(f64::NAN, 0.0, 0.0, w),
        Err(LossError::NonFinite { component: "dice", .. })
    ));
    assert!(LossWeights {
        alpha_att: -1.0,
        beta_lmmd: 0.0
    }
    .validate()
    .is_err());
}

#[test]
fn zero_alpha_removes_attention_gradient_exactly() {
    let grads = |alpha: f64| {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![0.2, 0.5, 0.9]), true);
        let y = tape.leaf(t(&[3], vec![1.0, -2.0, 0.5]), true);
        let d = tape.sum(x);
        let a = {
            let sq = tape.mul(y, x).unwrap();
            tape.sum(sq)
        };
        let w = LossWeights {
            alpha_att: alpha,
            beta_lmmd: 0.0,
        };
        let l = total_on_tape(&mut tape, d, Some(a), None, w).unwrap();
        let g = tape.backward(l).unwrap();
        (g.wrt(x), g.wrt(y), tape.value(l).item(), tape.value(d).item())
    };
    let (gx, gy, l, d) = grads(0.0);
    assert_eq!(gx.data(), &[1.0, 1.0, 1.0]);
    assert!(gy.data().iter().all(|&v| v == 0.0));
    assert_eq!(l, d);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_loss_is_a_pseudometric(sa in any::<u64>(), sb in any::<u64>(), sc in any::<u64>()) {
        let gen = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let vals: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..1.0)).collect();
            maps(2, 4, 3, |i| vals[i % vals.len()])
        };
        let (a, b, c) = (gen(sa), gen(sb), gen(sc));
        let d = |x: &AttentionMaps, y: &AttentionMaps| attention_consistency_loss(std::slice::from_ref(x), std::slice::from_ref(y)).unwrap();
        let (ab, ba, ac, cb) = (d(&a, &b), d(&b, &a), d(&a, &c), d(&c, &b));
        prop_assert!(ab.total >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(d(&a, &a).total, 0.0);
        prop_assert!(ab.total <= ac.total + cb.total + 1e-12);
    }

    #[test]
    fn lmmd_is_non_negative(seed in any::<u64>(), ns in 1usize..8, nt in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs = random_rows(&mut rng, ns, 3, 2.0);
        let zt = random_rows(&mut rng, nt, 3, 2.0);
        let ys = random_labels(&mut rng, ns, 2);
        let yt = random_labels(&mut rng, nt, 2);
        let v = lmmd_loss(&flat(&zs), &flat(&ys), &flat(&zt), &flat(&yt), &KernelSpec::default()).unwrap();
        prop_assert!(v >= -1e-9);
    }

    #[test]
    fn class_weights_normalize_per_class(seed in any::<u64>(), n in 1usize..10, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_labels(&mut rng, n, c);
        let w = class_weights(&flat(&y)).unwrap();
        for k in 0..c {
            prop_assert!(w.class(k).iter().all(|&v| v >= 0.0));
            prop_assert!((w.class(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_is_symmetric_and_psd(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = flat(&random_rows(&mut rng, n, 3, 1.0));
        let k = gaussian_kernel(&z, &z, &KernelSpec::default()).unwrap();
        for i in 0..n {
            prop_assert!((k.data()[i * n + i] - 5.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((k.data()[i * n + j] - k.data()[j * n + i]).abs() < 1e-12);
            }
        }
        // quadratic forms on random vectors stay non-negative
        for _ in 0..8 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| v[i] * v[j] * k.data()[i * n + j]).sum();
            prop_assert!(q >= -1e-9);
        }
    }

    #[test]
    fn total_is_linear_in_each_term(d in 0.0f64..1.0, a in 0.0f64..2.0, l in 0.0f64..0.1, k in 0.0f64..3.0) {
        let w = LossWeights::default();
        let base = total_loss(d, a, l, w).unwrap();
        prop_assert!((total_loss(d + k, a, l, w).unwrap() - base - k).abs() < 1e-9);
        prop_assert!((total_loss(d, a + k, l, w).unwrap() - base - w.alpha_att * k).abs() < 1e-9);
        prop_assert!((total_loss(d, a, l + k, w).unwrap() - base - w.beta_lmmd * k).abs() < 1e-9);
    }
}
