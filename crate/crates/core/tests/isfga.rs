mod common;

use common::{dot, fd_check, probe, random_tensor, rng};
use merid_core::graph::{attention_scores, Graph};
use merid_core::isfga::{BlockToggles, IsfgaBlock, UNetConfig};
use merid_core::nn::Params;
use merid_core::Tensor;
use rand::Rng;

const C: usize = 8;
const S: usize = 4;

fn cfg(kernels: Vec<usize>) -> UNetConfig {
    UNetConfig {
        widths: vec![C, C],
        heads: 4,
        band_kernels: kernels,
        ..Default::default()
    }
}

fn block(kernels: Vec<usize>, toggles: BlockToggles, seed: u64) -> (IsfgaBlock, Params) {
    let b = IsfgaBlock::new("blk", C, S, &cfg(kernels), None, toggles);
    let mut p = Params::new();
    b.init(&mut p, &mut rng(seed));
    (b, p)
}

fn set(p: &mut Params, name: &str, f: impl FnMut(usize) -> f64) {
    let t = p.get(name);
    let data = (0..t.numel()).map(f).collect();
    let shape = t.shape().to_vec();
    p.insert(name, Tensor::new(&shape, data));
}

fn randomize(p: &mut Params, name: &str, scale: f64, seed: u64) {
    let mut r = rng(seed);
    set(p, name, |_| r.random_range(-scale..scale));
}

/// Gate ≡ 1 exactly: zero weights and a bias deep in sigmoid saturation.
fn open_gate(p: &mut Params) {
    set(p, "blk.gate.weight", |_| 0.0);
    set(p, "blk.gate.bias", |_| 40.0);
}

/// Independent multi-head attention over `[c, h, w]` with 1×1 projections.
fn reference_attention(p: &Params, x: &Tensor, heads: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let n = h * w;
    let proj = |name: &str, input: &[f64]| -> Vec<f64> {
        let wt = p.get(&format!("blk.{name}.weight")).data();
        let b = p.get(&format!("blk.{name}.bias")).data();
        let mut out = vec![0.0; c * n];
        for o in 0..c {
            for t in 0..n {
                out[o * n + t] = b[o] + (0..c).map(|i| wt[o * c + i] * input[i * n + t]).sum::<f64>();
            }
        }
        out
    };
    let (q, k, v) = (proj("q", x.data()), proj("k", x.data()), proj("v", x.data()));
    let d = c / heads;
    let mut att = vec![0.0; c * n];
    for hd in 0..heads {
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|e| q[(hd * d + e) * n + i] * k[(hd * d + e) * n + j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for e in 0..d {
                let ch = hd * d + e;
                att[ch * n + i] = (0..n).map(|j| (s[j] - m).exp() / z * v[ch * n + j]).sum();
            }
        }
    }
    let out = proj("out", &att);
    Tensor::new(&[c, h, w], x.data().iter().zip(&out).map(|(a, b)| a + b).collect())
}

fn run(b: &IsfgaBlock, p: &Params, x: &Tensor, s: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let sv = g.constant(s.clone());
    let v = b.forward(&mut g, p, xv, Some(sv)).unwrap();
    (g.value(v.out).clone(), g.value(v.q).clone(), g.value(v.k).clone(), g.value(v.attended).clone())
}

#[test]
fn reduces_to_plain_attention() {
    let (b, mut p) = block(vec![3, 5, 7], BlockToggles::FULL, 1);
    open_gate(&mut p);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let x = random_tensor(&[C, 8, 8], -1.0, 1.0, 100 + i);
        let s = random_tensor(&[S, 8, 8], -1.0, 1.0, 200 + i);
        let (out, ..) = run(&b, &p, &x, &s);
        worst = worst.max(out.max_abs_diff(&reference_attention(&p, &x, 4)));
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn scores_ignore_modulation_and_gate() {
    let (full, mut p) = block(vec![3, 5], BlockToggles::FULL, 2);
    randomize(&mut p, "blk.band0.mlp2.weight", 0.5, 3);
    randomize(&mut p, "blk.band1.mlp2.bias", 0.5, 4);
    let plain = IsfgaBlock::new("blk", C, S, &cfg(vec![3, 5]), None, BlockToggles::PLAIN);
    let x = random_tensor(&[C, 8, 8], -1.0, 1.0, 5);
    let s = random_tensor(&[S, 8, 8], -1.0, 1.0, 6);
    let (out_a, qa, ka, _) = run(&full, &p, &x, &s);
    let (out_b, qb, kb, _) = run(&plain, &p, &x, &s);
    assert_eq!(qa, qb);
    assert_eq!(ka, kb);
    assert_eq!(attention_scores(&qa, &ka, 4, None), attention_scores(&qb, &kb, 4, None));
    assert!(out_a.max_abs_diff(&out_b) > 1e-6);
}

#[test]
fn score_rows_are_distributions() {
    let q = random_tensor(&[C, 8, 8], -3.0, 3.0, 7);
    let k = random_tensor(&[C, 8, 8], -3.0, 3.0, 8);
    for window in [None, Some(4)] {
        for row in attention_scores(&q, &k, 4, window).chunks(1).flatten() {
            let n = (row.len() as f64).sqrt().round() as usize;
            assert_eq!(n * n, row.len());
            for r in row.chunks(n) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(r.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn zero_band_coefficients_keep_values() {
    let (b, p) = block(vec![3, 5, 7], BlockToggles::FULL, 9);
    let mut g = Graph::inference();
    let v = g.constant(random_tensor(&[C, 8, 8], -1.0, 1.0, 10));
    let s = g.constant(random_tensor(&[S, 8, 8], -1.0, 1.0, 11));
    let bands = b.band_decompose(&mut g, &p, v).unwrap();
    let (spec, energies) = b.modulate_values(&mut g, &p, v, &bands, s).unwrap();
    assert_eq!(g.value(spec), g.value(v));
    assert_eq!(energies.len(), 3);
    assert_eq!(g.shape(energies[0]), &[4, 1, 1]);
}

#[test]
fn negative_identity_band_cancels_values() {
    let (b, mut p) = block(vec![1], BlockToggles::FULL, 12);
    set(&mut p, "blk.band0.mlp2.bias", |_| -1.0);
    let mut g = Graph::inference();
    let v = g.constant(random_tensor(&[C, 6, 6], -1.0, 1.0, 13));
    let s = g.constant(random_tensor(&[S, 6, 6], -1.0, 1.0, 14));
    let bands = b.band_decompose(&mut g, &p, v).unwrap();
    assert_eq!(g.value(bands[0]), g.value(v));
    let (spec, _) = b.modulate_values(&mut g, &p, v, &bands, s).unwrap();
    assert!(g.value(spec).data().iter().all(|&x| x == 0.0));
}

#[test]
fn constant_input_gives_constant_bands() {
    let (b, p) = block(vec![3, 5, 7], BlockToggles::FULL, 15);
    let mut g = Graph::inference();
    let v = g.constant(Tensor::full(&[C, 9, 9], 0.25));
    for band in b.band_decompose(&mut g, &p, v).unwrap() {
        assert!(g.value(band).data().iter().all(|x| (x - 0.25).abs() < 1e-12));
    }
}

#[test]
fn half_gate_halves_attention() {
    let (b, mut p) = block(vec![3], BlockToggles::FULL, 16);
    set(&mut p, "blk.gate.weight", |_| 0.0);
    set(&mut p, "blk.gate.bias", |_| 0.0);
    let x = random_tensor(&[C, 8, 8], -1.0, 1.0, 17);
    let s = random_tensor(&[S, 8, 8], -1.0, 1.0, 18);
    let (out, .., att) = run(&b, &p, &x, &s);
    let plain = IsfgaBlock::new("blk", C, S, &cfg(vec![3]), None, BlockToggles::PLAIN);
    let (plain_out, .., plain_att) = run(&plain, &p, &x, &s);
    assert_eq!(att, plain_att.map(|v| 0.5 * v));
    let bias = p.get("blk.out.bias");
    let pre_bias = |o: &Tensor| {
        let mut t = o.zip_map(&x, |a, b| a - b);
        for c in 0..C {
            for v in &mut t.data_mut()[c * 64..(c + 1) * 64] {
                *v -= bias.data()[c];
            }
        }
        t
    };
    let half = pre_bias(&plain_out).map(|v| 0.5 * v);
    assert!(pre_bias(&out).max_abs_diff(&half) < 1e-12);
}

#[test]
fn single_token_skips_softmax() {
    let (b, mut p) = block(vec![1], BlockToggles::FULL, 19);
    randomize(&mut p, "blk.band0.mlp2.weight", 0.5, 20);
    let x = random_tensor(&[C, 1, 1], -1.0, 1.0, 21);
    let s = random_tensor(&[S, 1, 1], -1.0, 1.0, 22);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let sv = g.constant(s);
    let v = b.forward(&mut g, &p, xv, Some(sv)).unwrap();
    let gated = g.value(v.v_spec).zip_map(g.value(v.gate.unwrap()), |a, b| a * b);
    assert!(g.value(v.attended).max_abs_diff(&gated) < 1e-15);
    assert_eq!(attention_scores(g.value(v.q), g.value(v.k), 4, None), vec![vec![1.0]; 4]);
}

#[test]
fn modulation_gradients_match_finite_differences() {
    let (b, mut p) = block(vec![3, 5], BlockToggles::FULL, 23);
    for band in 0..2 {
        randomize(&mut p, &format!("blk.band{band}.mlp2.weight"), 0.4, 24 + band);
    }
    p.insert("v", random_tensor(&[C, 8, 8], -1.0, 1.0, 30));
    p.insert("state", random_tensor(&[S, 8, 8], -1.0, 1.0, 31));
    let w = probe(&[C, 8, 8], 32);
    let build = |g: &mut Graph, p: &Params| {
        let v = g.param("v", p.get("v"));
        let s = g.param("state", p.get("state"));
        let bands = b.band_decompose(g, p, v).unwrap();
        b.modulate_values(g, p, v, &bands, s).unwrap().0
    };
    let f = |p: &Params| {
        let mut g = Graph::inference();
        let out = build(&mut g, p);
        dot(g.value(out), &w)
    };
    let mut g = Graph::new();
    let out = build(&mut g, &p);
    let grads = g.backward_with(out, w.clone()).named();
    let names: Vec<String> = p.iter().map(|(n, _)| n.clone()).filter(|n| !n.contains(".q.") && !n.contains(".k.") && !n.contains(".out.") && !n.contains("gate")).collect();
    assert!(names.iter().any(|n| n.contains("phi")));
    let err = fd_check(&p, &names, &grads, 1e-5, f);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gated_attention_gradients_match_finite_differences() {
    let (b, mut p) = block(vec![3, 5], BlockToggles::FULL, 40);
    for band in 0..2 {
        randomize(&mut p, &format!("blk.band{band}.mlp2.weight"), 0.4, 41 + band);
    }
    p.insert("x", random_tensor(&[C, 8, 8], -1.0, 1.0, 50));
    p.insert("state", random_tensor(&[S, 8, 8], -1.0, 1.0, 51));
    let w = probe(&[C, 8, 8], 52);
    let build = |g: &mut Graph, p: &Params| {
        let x = g.param("x", p.get("x"));
        let s = g.param("state", p.get("state"));
        b.forward(g, p, x, Some(s)).unwrap().out
    };
    let f = |p: &Params| {
        let mut g = Graph::inference();
        let out = build(&mut g, p);
        dot(g.value(out), &w)
    };
    let mut g = Graph::new();
    let out = build(&mut g, &p);
    let grads = g.backward_with(out, w.clone()).named();
    let names: Vec<String> = p.iter().map(|(n, _)| n.clone()).collect();
    for part in ["blk.q.", "blk.k.", "blk.v.", "mlp1", "mlp2", "blk.phi.", "blk.gate."] {
        assert!(names.iter().any(|n| n.contains(part)), "{part}");
    }
    let err = fd_check(&p, &names, &grads, 1e-5, f);
    assert!(err < 1e-4, "relative error {err}");
}
