//! Model behavior against straight-line reference evaluations.

use fedda_core::autodiff::{peak_score_block, reset_peak_score_block, AttentionLayout, Tape, Tensor};
use fedda_core::model::{
    assemble, block_forward, divided_attention, embed, forward, init_weights, parameter_count, patchify, qkv_project,
    segment_head, BoundWeights, GatedVolumeSequence, ModelConfig, ModelError, WeightSet, LN_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(v: usize, p: usize, t: usize, d: usize, heads: usize, blocks: usize) -> ModelConfig {
    ModelConfig {
        volume_side: v,
        patch_side: p,
        gates: t,
        d_model: d,
        heads,
        blocks,
    }
}

fn small() -> ModelConfig {
    cfg(8, 4, 2, 8, 2, 2)
}

fn random_input(c: &ModelConfig, seed: u64) -> GatedVolumeSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gates = (0..c.gates)
        .map(|_| (0..c.voxels()).map(|_| rng.random_range(0.0f32..1.0)).collect())
        .collect();
    GatedVolumeSequence::new(c.volume_side, gates, None, None).unwrap()
}

/// Initial weights with every array randomized, so no path is trivially zero.
fn random_weights(c: &ModelConfig, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let mut w = init_weights(c, seed);
    for (name, t) in w.as_map_mut().iter_mut() {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = base + rng.random_range(-0.3..0.3));
        }
    }
    w
}

// ── straight-line reference ─────────────────────────────────────────

type Rows = Vec<Vec<f64>>;

fn rows_of(t: &Tensor) -> Rows {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vec_of(w: &WeightSet, name: &str) -> Vec<f64> {
    w.get(name).unwrap().data().to_vec()
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    rows_of(w)
        .iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mu) / (var + LN_EPS).sqrt() * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn tok(c: &ModelConfig, p: usize, t: usize) -> usize {
    1 + t * c.patches() + p
}

fn dotr(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Divided attention for packed heads, evaluated one query at a time.
fn ref_attention(c: &ModelConfig, q: &Rows, k: &Rows, v: &Rows) -> Rows {
    let (n, t, dh) = (c.patches(), c.gates, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut s = vec![vec![0.0; c.d_model]; q.len()];
    for a in 0..c.heads {
        let cols = a * dh..(a + 1) * dh;
        let h = |r: &Vec<f64>| r[cols.clone()].to_vec();
        let score = |i: usize, j: usize| dotr(&h(&q[i]), &h(&k[j])) * scale;
        let mut add = |dst: usize, w: f64, src: usize| {
            for (o, x) in s[dst][cols.clone()].iter_mut().zip(&h(&v[src])) {
                *o += w * x;
            }
        };
        let all: Vec<usize> = (0..q.len()).collect();
        let wc = softmax(&all.iter().map(|&j| score(0, j)).collect::<Vec<_>>());
        for (&j, &w) in all.iter().zip(&wc) {
            add(0, w, j);
        }
        for tt in 0..t {
            for p in 0..n {
                let i = tok(c, p, tt);
                let tkeys: Vec<usize> = std::iter::once(0).chain((0..t).map(|t2| tok(c, p, t2))).collect();
                let skeys: Vec<usize> = std::iter::once(0).chain((0..n).map(|p2| tok(c, p2, tt))).collect();
                let wt = softmax(&tkeys.iter().map(|&j| score(i, j)).collect::<Vec<_>>());
                let ws = softmax(&skeys.iter().map(|&j| score(i, j)).collect::<Vec<_>>());
                for (&j, &w) in tkeys.iter().zip(&wt) {
                    add(i, w, j);
                }
                // the spatial CLS weight only normalizes
                for (&j, &w) in skeys.iter().zip(&ws).skip(1) {
                    add(i, w, j);
                }
            }
        }
    }
    s
}

fn ref_block(c: &ModelConfig, w: &WeightSet, b: usize, z: &Rows) -> Rows {
    let f = |x: &str| format!("block{b:02}.{x}");
    let g = |x: &str| w.get(&f(x)).unwrap();
    let h: Rows = z
        .iter()
        .map(|r| ln_row(r, &vec_of(w, &f("ln1.gamma")), &vec_of(w, &f("ln1.beta"))))
        .collect();
    let proj = |name: &str| -> Rows { h.iter().map(|r| matvec(g(name), r)).collect() };
    let s = ref_attention(c, &proj("w_q"), &proj("w_k"), &proj("w_v"));
    let mid: Rows = s
        .iter()
        .zip(z)
        .map(|(si, zi)| matvec(g("w_o"), si).iter().zip(zi).map(|(a, b)| a + b).collect())
        .collect();
    mid.iter()
        .map(|m| {
            let n = ln_row(m, &vec_of(w, &f("ln2.gamma")), &vec_of(w, &f("ln2.beta")));
            let hid: Vec<f64> = matvec(g("mlp.w1"), &n)
                .iter()
                .zip(&vec_of(w, &f("mlp.b1")))
                .map(|(a, b)| gelu(a + b))
                .collect();
            let out = matvec(g("mlp.w2"), &hid);
            out.iter()
                .zip(&vec_of(w, &f("mlp.b2")))
                .zip(m)
                .map(|((o, b), m)| o + b + m)
                .collect()
        })
        .collect()
}

fn ref_embed(c: &ModelConfig, w: &WeightSet, x: &GatedVolumeSequence) -> Rows {
    let patches = rows_of(&patchify(x, c).unwrap());
    let pos = rows_of(w.get("embed.pos").unwrap());
    let mut z = vec![vec_of(w, "embed.cls")];
    z.extend(patches.iter().map(|p| matvec(w.get("embed.E").unwrap(), p)));
    z.iter()
        .zip(&pos)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn ref_forward(c: &ModelConfig, w: &WeightSet, x: &GatedVolumeSequence) -> Vec<f64> {
    let mut z = ref_embed(c, w, x);
    for b in 0..c.blocks {
        z = ref_block(c, w, b, &z);
    }
    let n = ln_row(&z[0], &vec_of(w, "head.ln.gamma"), &vec_of(w, "head.ln.beta"));
    let hid: Vec<f64> = matvec(w.get("head.w1").unwrap(), &n)
        .iter()
        .zip(&vec_of(w, "head.b1"))
        .map(|(a, b)| gelu(a + b))
        .collect();
    matvec(w.get("head.w2").unwrap(), &hid)
        .iter()
        .zip(&vec_of(w, "head.b2"))
        .map(|(o, b)| 1.0 / (1.0 + (-(o + b)).exp()))
        .collect()
}

fn max_diff(a: &Rows, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ── tests ───────────────────────────────────────────────────────────

#[test]
fn patchify_counts_and_round_trip() {
    let c = cfg(4, 2, 2, 4, 1, 1);
    let x = random_input(&c, 3);
    let p = patchify(&x, &c).unwrap();
    assert_eq!(c.patches(), 8);
    assert_eq!(p.shape(), &[16, 8]);
    let back = assemble(&p, &c).unwrap();
    for (t, vol) in back.iter().enumerate() {
        let orig: Vec<f64> = x.gate(t).iter().map(|&v| v as f64).collect();
        assert_eq!(vol, &orig);
    }

    let whole = cfg(4, 4, 2, 4, 1, 1);
    let p = patchify(&x, &whole).unwrap();
    assert_eq!(p.shape(), &[2, 64]);
    assert_eq!(p.data()[64..].iter().map(|&v| v as f32).collect::<Vec<_>>(), x.gate(1));

    assert!(matches!(cfg(4, 3, 2, 4, 1, 1).validate(), Err(ModelError::Config(_))));
    assert!(cfg(8, 4, 2, 8, 2, 0).validate().is_err());
    assert!(cfg(8, 4, 0, 8, 2, 1).validate().is_err());
}

#[test]
fn embed_matches_matvec_oracle() {
    let c = small();
    let w = random_weights(&c, 5);
    let x = random_input(&c, 6);
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, &w, &c, false).unwrap();
    let patches = tape.constant(patchify(&x, &c).unwrap());
    let z = embed(
        &mut tape,
        patches,
        bound.get("embed.E"),
        bound.get("embed.pos"),
        bound.get("embed.cls"),
    )
    .unwrap();
    assert_eq!(tape.shape(z), &[c.tokens(), c.d_model]);
    assert!(max_diff(&ref_embed(&c, &w, &x), tape.value(z).data()) < 1e-12);

    // x = 0 leaves exactly the positional table (and the CLS row)
    let zero = GatedVolumeSequence::new(8, vec![vec![0.0; 512]; 2], None, None).unwrap();
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, &w, &c, false).unwrap();
    let patches = tape.constant(patchify(&zero, &c).unwrap());
    let z = embed(
        &mut tape,
        patches,
        bound.get("embed.E"),
        bound.get("embed.pos"),
        bound.get("embed.cls"),
    )
    .unwrap();
    let pos = w.get("embed.pos").unwrap().data();
    assert_eq!(&tape.value(z).data()[c.d_model..], &pos[c.d_model..]);

    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::zeros([4, 3]));
    let e = tape.constant(Tensor::zeros([8, 64]));
    let pos = tape.constant(Tensor::zeros([5, 8]));
    let cls = tape.constant(Tensor::zeros([1, 8]));
    assert!(embed(&mut tape, bad, e, pos, cls).is_err());
}

#[test]
fn qkv_projection_matches_oracle() {
    let c = small();
    let w = random_weights(&c, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = Tensor::from_fn([c.tokens(), c.d_model], |_| rng.random_range(-2.0..2.0));
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, &w, &c, false).unwrap();
    let zv = tape.constant(z.clone());
    let dh = c.head_dim();
    for head in 0..c.heads {
        let (q, k, v) = qkv_project(&mut tape, zv, &bound, 1, head, &c).unwrap();
        for (var, field) in [(q, "w_q"), (k, "w_k"), (v, "w_v")] {
            let full = w.get(&format!("block01.{field}")).unwrap();
            let expect: Vec<f64> = rows_of(&z)
                .iter()
                .flat_map(|r| {
                    let h = ln_row(r, &vec_of(&w, "block01.ln1.gamma"), &vec_of(&w, "block01.ln1.beta"));
                    matvec(full, &h)[head * dh..(head + 1) * dh].to_vec()
                })
                .collect();
            let got = tape.value(var).data();
            assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
    assert!(matches!(
        qkv_project(&mut tape, zv, &bound, 0, c.heads, &c),
        Err(ModelError::HeadIndex { .. })
    ));

    // constant rows normalize to zero; with zero LN shift, q = 0
    let mut w0 = w.clone();
    w0.insert("block00.ln1.beta", Tensor::zeros([c.d_model]));
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, &w0, &c, false).unwrap();
    let zc = tape.constant(Tensor::full([c.tokens(), c.d_model], 0.7));
    let (q, _, _) = qkv_project(&mut tape, zc, &bound, 0, 0, &c).unwrap();
    assert!(tape.value(q).data().iter().all(|&v| v.abs() < 1e-12));
}

fn attention_on(c: &ModelConfig, q: &Tensor, k: &Tensor, v: &Tensor) -> (Rows, Tensor, Tensor) {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (s, maps) = divided_attention(&mut tape, qv, kv, vv, c.layout()).unwrap();
    (
        rows_of(tape.value(s)),
        tape.value(maps.temporal).clone(),
        tape.value(maps.spatial).clone(),
    )
}

#[test]
fn uniform_single_patch_single_gate() {
    // N = 1, T = 1, zero queries: every softmax is uniform over two keys
    let c = cfg(2, 2, 1, 2, 1, 1);
    let q = Tensor::zeros([2, 2]);
    let v = Tensor::new([2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let (s, ta, sa) = attention_on(&c, &q, &q, &v);
    assert!(ta.data().iter().chain(sa.data()).all(|&w| (w - 0.5).abs() < 1e-15));
    // one CLS term from the temporal softmax, plus the patch value from both
    let want = [0.5 * 1.0 + 0.5 * 0.5 + 0.5 * 0.5, 0.5 * -2.0 + 0.5 * 3.0 + 0.5 * 3.0];
    assert!(
        (s[1][0] - want[0]).abs() < 1e-15 && (s[1][1] - want[1]).abs() < 1e-15,
        "{s:?}"
    );
    // CLS row: full attention over both tokens
    assert!((s[0][0] - 0.75).abs() < 1e-15 && (s[0][1] - 0.5).abs() < 1e-15);
}

#[test]
fn identical_values_follow_weight_sums() {
    let c = cfg(8, 4, 2, 8, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = Tensor::from_fn([c.tokens(), 8], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::from_fn([c.tokens(), 8], |_| rng.random_range(-1.0..1.0));
    let u: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let v = Tensor::from_fn([c.tokens(), 8], |i| u[i % 8]);
    let (s, _, sa) = attention_on(&c, &q, &k, &v);
    let (n, t) = (c.patches(), c.gates);
    for a in 0..c.heads {
        for tt in 0..t {
            for p in 0..n {
                // temporal weights sum to one; the spatial ones miss their CLS share
                let cls_s = sa.data()[((a * t + tt) * n + p) * (n + 1)];
                for col in a * 4..(a + 1) * 4 {
                    let want = (2.0 - cls_s) * u[col];
                    assert!((s[tok(&c, p, tt)][col] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn attention_matches_reference_and_is_row_stochastic() {
    for (seed, c) in [(1, small()), (2, cfg(8, 2, 3, 12, 3, 1)), (3, cfg(4, 4, 4, 4, 1, 1))] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |_| rng.random_range(-2.0..2.0);
        let q = Tensor::from_fn([c.tokens(), c.d_model], &mut r);
        let k = Tensor::from_fn([c.tokens(), c.d_model], &mut r);
        let v = Tensor::from_fn([c.tokens(), c.d_model], &mut r);
        reset_peak_score_block();
        let (s, ta, sa) = attention_on(&c, &q, &k, &v);
        let expect = ref_attention(&c, &rows_of(&q), &rows_of(&k), &rows_of(&v));
        assert!(max_diff(&expect, &s.concat()) < 1e-12);
        let (n, t) = (c.patches(), c.gates);
        assert_eq!(ta.shape(), &[c.heads, n, t, t + 1]);
        assert_eq!(sa.shape(), &[c.heads, t, n, n + 1]);
        for row in ta.data().chunks(t + 1).chain(sa.data().chunks(n + 1)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // one block of query rows × (T+1) or (N+1) keys, or the CLS row
        let largest = ((n * t) * (t + 1).max(n + 1)).max(n * t + 1);
        assert!(peak_score_block() <= largest);
        if n > 1 && t > 1 {
            assert!(peak_score_block() < (n * t) * (n * t));
        }
    }
}

#[test]
fn block_matches_reference() {
    for (seed, c) in [(4, small()), (5, cfg(8, 4, 3, 6, 3, 2))] {
        let w = random_weights(&c, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let z = Tensor::from_fn([c.tokens(), c.d_model], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let bound = BoundWeights::bind(&mut tape, &w, &c, false).unwrap();
        let zv = tape.constant(z.clone());
        let (out, _) = block_forward(&mut tape, zv, &bound, 1, &c).unwrap();
        let expect = ref_block(&c, &w, 1, &rows_of(&z));
        assert!(max_diff(&expect, tape.value(out).data()) < 1e-10);
    }
}

#[test]
fn zero_projection_and_mlp_is_pure_residual() {
    let c = small();
    let mut w = random_weights(&c, 21);
    for f in ["w_o", "mlp.w2", "mlp.b2"] {
        let name = format!("block00.{f}");
        let shape = w.get(&name).unwrap().shape().to_vec();
        w.insert(name, Tensor::zeros(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Tensor::from_fn([c.tokens(), c.d_model], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, &w, &c, false).unwrap();
    let zv = tape.constant(z.clone());
    let (out, _) = block_forward(&mut tape, zv, &bound, 0, &c).unwrap();
    assert_eq!(tape.value(out), &z);
}

#[test]
fn forward_matches_reference() {
    let c = small();
    let w = random_weights(&c, 31);
    let x = random_input(&c, 32);
    let out = forward(&x, &w, &c).unwrap();
    let expect = ref_forward(&c, &w, &x);
    let diff = out
        .prob
        .data()
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-10, "{diff}");
    assert_eq!(out.prob.shape(), &[8, 8, 8]);
    assert_eq!(out.features.shape(), &[c.patches() * c.gates, c.d_model]);
    assert!(out.prob.data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(out.maps.max_row_sum_error() < 1e-12);
    assert_eq!(forward(&x, &w, &c).unwrap(), out, "forward must be pure");
}

#[test]
fn zero_head_gives_one_half_and_bias_is_monotone() {
    let c = small();
    let mut w = random_weights(&c, 41);
    for name in ["head.w1", "head.b1", "head.w2", "head.b2"] {
        let shape = w.get(name).unwrap().shape().to_vec();
        w.insert(name, Tensor::zeros(shape));
    }
    let x = random_input(&c, 42);
    assert!(forward(&x, &w, &c).unwrap().prob.data().iter().all(|&p| p == 0.5));

    let w = random_weights(&c, 43);
    let base = forward(&x, &w, &c).unwrap().prob;
    let mut bumped = w.clone();
    let mut b2 = w.get("head.b2").unwrap().clone();
    b2.data_mut()[77] += 0.25;
    bumped.insert("head.b2", b2);
    let after = forward(&x, &bumped, &c).unwrap().prob;
    assert!(after.data()[77] > base.data()[77]);
    for i in (0..512).filter(|&i| i != 77) {
        assert_eq!(after.data()[i], base.data()[i]);
    }

    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, &w, &c, false).unwrap();
    let cls = tape.constant(Tensor::zeros([1, c.d_model]));
    let prob = segment_head(&mut tape, cls, &bound, &c).unwrap();
    assert_eq!(tape.shape(prob), &[8, 8, 8]);
}

#[test]
fn head_output_count_at_full_side() {
    let c = ModelConfig::default();
    assert_eq!(c.voxels(), 32768);
    let shapes = fedda_core::model::expected_shapes(&c);
    assert_eq!(shapes["head.w2"][0], 32768);
}

#[test]
fn gate_order_matters() {
    let c = small();
    let w = random_weights(&c, 51);
    let x = random_input(&c, 52);
    let swapped = x.with_gates(vec![x.gate(1).to_vec(), x.gate(0).to_vec()]).unwrap();
    let a = forward(&x, &w, &c).unwrap().prob;
    let b = forward(&swapped, &w, &c).unwrap().prob;
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn parameter_count_golden_values() {
    // d = 8, h = 32, P³ = 64, tokens = 17, V³ = 512, two blocks
    let per_block = 4 * 64 + 2 * 8 + 2 * 8 + 32 * 8 + 32 + 8 * 32 + 8;
    let want = 8 * 64 + 17 * 8 + 8 + 2 * per_block + 2 * 8 + 32 * 8 + 32 + 512 * 32 + 512;
    assert_eq!(parameter_count(&small()), want);
    assert_eq!(init_weights(&small(), 0).parameter_count(), want);
    assert_eq!(parameter_count(&ModelConfig::default()), 8_678_144);
}

#[test]
fn missing_weights_are_listed() {
    let c = small();
    let mut w = init_weights(&c, 0);
    w.as_map_mut().remove("block01.w_k");
    w.as_map_mut().remove("head.b1");
    let err = forward(&random_input(&c, 0), &w, &c).unwrap_err();
    match err {
        ModelError::MissingWeights(names) => assert_eq!(names, vec!["block01.w_k", "head.b1"]),
        e => panic!("{e}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_always_sum_to_one(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let c = cfg(8, 4, 3, 8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |_| rng.random_range(-scale..scale);
        let q = Tensor::from_fn([c.tokens(), 8], &mut r);
        let k = Tensor::from_fn([c.tokens(), 8], &mut r);
        let (_, ta, sa) = attention_on(&c, &q, &k, &q);
        for row in ta.data().chunks(4).chain(sa.data().chunks(9)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn patchify_round_trips(seed in any::<u64>(), p in prop::sample::select(vec![1usize, 2, 4])) {
        let c = cfg(4, p, 2, 4, 1, 1);
        let x = random_input(&c, seed);
        let back = assemble(&patchify(&x, &c).unwrap(), &c).unwrap();
        for (t, vol) in back.iter().enumerate() {
            prop_assert!(vol.iter().zip(x.gate(t)).all(|(a, &b)| *a == b as f64));
        }
    }
}

#[test]
fn layout_matches_config() {
    let c = small();
    let l: AttentionLayout = c.layout();
    assert_eq!(l.tokens(), 1 + c.patches() * c.gates);
    assert_eq!(l.head_dim(), c.head_dim());
    assert_eq!(l.token(3, 1), 1 + c.patches() + 3);
}
