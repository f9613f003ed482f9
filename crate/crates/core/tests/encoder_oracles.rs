//! Encoders against straight-line reference implementations.

use bundlekit::bundle_encoder::{encode_bundle, encode_bundles, BundleEncoderParams};
use bundlekit::item_encoder::{
    attention_layer, build_feature_matrix, encode_item, encode_items, AttentionWeights, ItemEncodeOptions,
    ItemEncoderNodes, ItemEncoderParams, ItemSources,
};
use bundlekit::numerics::gradcheck::{finite_difference, relative_error};
use bundlekit::numerics::{Graph, Matrix};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn to_rows(m: &Matrix<f64>) -> Rows {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn vec_mat(v: &[f64], w: &Rows) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (k, &x) in v.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += x * w[k][j];
        }
    }
    out
}

/// softmax((H·Wk)(H·Wq)ᵀ / √d) · H, written out longhand.
fn reference_attention(h: &Rows, wk: &Rows, wq: &Rows) -> Rows {
    let d = h[0].len();
    let keys: Rows = h.iter().map(|r| vec_mat(r, wk)).collect();
    let queries: Rows = h.iter().map(|r| vec_mat(r, wq)).collect();
    let mut out = Vec::new();
    for k in &keys {
        let logits: Vec<f64> = queries
            .iter()
            .map(|q| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut row = vec![0.0; d];
        for (e, hr) in exps.iter().zip(h) {
            for (o, v) in row.iter_mut().zip(hr) {
                *o += e / total * v;
            }
        }
        out.push(row);
    }
    out
}

fn reference_mean(rows: &Rows) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn layers(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<AttentionWeights<f64>> {
    (0..n)
        .map(|_| AttentionWeights {
            key: random_matrix(d, d, rng),
            query: random_matrix(d, d, rng),
        })
        .collect()
}

fn fixture(seed: u64, n_layers: usize) -> (ItemEncoderParams<f64>, ItemSources<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, f, c, d) = (5, 6, 3, 4);
    let params = ItemEncoderParams {
        content_proj: random_matrix(f, d, &mut rng),
        feedback_proj: random_matrix(c, d, &mut rng),
        id_table: random_matrix(n, d, &mut rng),
        layers: layers(n_layers, d, &mut rng),
    };
    let src = ItemSources {
        content: random_matrix(n, f, &mut rng),
        feedback: random_matrix(n, c, &mut rng),
        has_feedback: vec![true, false, true, false, true],
        use_id: vec![true, true, false, false, true],
        drop_content: vec![false; n],
        id_noise: None,
        id_mask: None,
    };
    (params, src)
}

#[test]
fn attention_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = random_matrix(3, 4, &mut rng);
    let (wk, wq) = (random_matrix(4, 4, &mut rng), random_matrix(4, 4, &mut rng));
    let mut g = Graph::new();
    let (hn, kn, qn) = (g.constant(h.clone()), g.constant(wk.clone()), g.constant(wq.clone()));
    let out = attention_layer(&mut g, hn, kn, qn).unwrap();
    let expected = reference_attention(&to_rows(&h), &to_rows(&wk), &to_rows(&wq));
    for (r, row) in expected.iter().enumerate() {
        assert!(max_gap(g.value(out).row(r), row) < 1e-10);
    }
}

#[test]
fn encode_item_matches_layered_reference() {
    let (params, src) = fixture(2, 2);
    let opts = ItemEncodeOptions::default();
    for item in 0..5 {
        let c = src.content.row(item);
        let cw = vec_mat(c, &to_rows(&params.content_proj));
        let feedback = if src.has_feedback[item] {
            vec_mat(src.feedback.row(item), &to_rows(&params.feedback_proj))
        } else {
            cw.clone()
        };
        let id = if src.use_id[item] { params.id_table.row(item).to_vec() } else { cw.clone() };
        let mut h = vec![cw, feedback, id];
        for l in &params.layers {
            h = reference_attention(&h, &to_rows(&l.key), &to_rows(&l.query));
        }
        let got = encode_item(item, &params, &src, opts).unwrap();
        assert!(max_gap(&got, &reference_mean(&h)) < 1e-9, "item {item}");
    }
}

#[test]
fn batched_items_match_single_items() {
    let (params, src) = fixture(3, 2);
    let opts = ItemEncodeOptions::default();
    let mut g = Graph::new();
    let nodes = ItemEncoderNodes::constants(&mut g, &params);
    let enc = encode_items(&mut g, &nodes, &src, opts).unwrap();
    for item in 0..5 {
        assert_eq!(g.value(enc.table).row(item), &encode_item(item, &params, &src, opts).unwrap()[..]);
    }
}

#[test]
fn feedback_cold_bundle_warm_item() {
    let (params, src) = fixture(4, 1);
    let f = build_feature_matrix(1, &params, &src, ItemEncodeOptions::default()).unwrap();
    let cw = vec_mat(src.content.row(1), &to_rows(&params.content_proj));
    assert!(max_gap(f.row(0), &cw) < 1e-15);
    assert_eq!(f.row(0), f.row(1));
    assert_eq!(f.row(2), params.id_table.row(1));
}

#[test]
fn encode_bundle_matches_layered_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let items = random_matrix(4, 3, &mut rng);
    let params = BundleEncoderParams {
        layers: layers(2, 3, &mut rng),
    };
    let mut h = to_rows(&items);
    for l in &params.layers {
        h = reference_attention(&h, &to_rows(&l.key), &to_rows(&l.query));
    }
    assert!(max_gap(&encode_bundle(&items, &params).unwrap(), &reference_mean(&h)) < 1e-9);
}

#[test]
fn item_gradients_match_finite_differences() {
    let (params, src) = fixture(6, 2);
    let opts = ItemEncodeOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let weights = random_matrix(5, 4, &mut rng);
    let loss_of = |p: &ItemEncoderParams<f64>| {
        let mut g = Graph::new();
        let nodes = ItemEncoderNodes::constants(&mut g, p);
        let enc = encode_items(&mut g, &nodes, &src, opts).unwrap();
        let w = g.constant(weights.clone());
        let m = g.mul(enc.table, w).unwrap();
        let s = g.sum(m).unwrap();
        g.scalar(s)
    };

    let mut g = Graph::new();
    let nodes = ItemEncoderNodes::params(&mut g, &params);
    let enc = encode_items(&mut g, &nodes, &src, opts).unwrap();
    let w = g.constant(weights.clone());
    let m = g.mul(enc.table, w).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();

    let mut checks: Vec<(Matrix<f64>, Matrix<f64>)> = Vec::new();
    let fd = |f: &dyn Fn(&Matrix<f64>) -> ItemEncoderParams<f64>, at: &Matrix<f64>| {
        finite_difference(|m| loss_of(&f(m)), at, 1e-5)
    };
    checks.push((
        g.grad_or_zeros(nodes.content_proj),
        fd(&|m| ItemEncoderParams { content_proj: m.clone(), ..params.clone() }, &params.content_proj),
    ));
    checks.push((
        g.grad_or_zeros(nodes.feedback_proj),
        fd(&|m| ItemEncoderParams { feedback_proj: m.clone(), ..params.clone() }, &params.feedback_proj),
    ));
    checks.push((
        g.grad_or_zeros(nodes.id_table),
        fd(&|m| ItemEncoderParams { id_table: m.clone(), ..params.clone() }, &params.id_table),
    ));
    for (l, &(k, q)) in nodes.layers.iter().enumerate() {
        let with_key = |m: &Matrix<f64>| {
            let mut p = params.clone();
            p.layers[l].key = m.clone();
            p
        };
        let with_query = |m: &Matrix<f64>| {
            let mut p = params.clone();
            p.layers[l].query = m.clone();
            p
        };
        checks.push((g.grad_or_zeros(k), fd(&with_key, &params.layers[l].key)));
        checks.push((g.grad_or_zeros(q), fd(&with_query, &params.layers[l].query)));
    }
    for (i, (analytic, numeric)) in checks.iter().enumerate() {
        let err = relative_error(analytic, numeric);
        assert!(err < 1e-4, "parameter {i}: relative error {err}");
    }
}

#[test]
fn bundle_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let items = random_matrix(4, 3, &mut rng);
    let params = BundleEncoderParams {
        layers: layers(2, 3, &mut rng),
    };
    let w = random_matrix(1, 3, &mut rng);
    let loss_of = |items: &Matrix<f64>, p: &BundleEncoderParams<f64>| {
        let e = encode_bundle(items, p).unwrap();
        e.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut g = Graph::new();
    let table = g.param(items.clone());
    let nodes: Vec<_> = params
        .layers
        .iter()
        .map(|l| (g.param(l.key.clone()), g.param(l.query.clone())))
        .collect();
    let (e, _) = encode_bundles(&mut g, table, &[vec![0, 1, 2, 3]], &nodes, true).unwrap();
    let wn = g.constant(w.clone());
    let m = g.mul(e, wn).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();

    let fd_items = finite_difference(|m| loss_of(m, &params), &items, 1e-5);
    assert!(relative_error(&g.grad_or_zeros(table), &fd_items) < 1e-4);
    for (z, &(k, q)) in nodes.iter().enumerate() {
        let fd_k = finite_difference(
            |m| {
                let mut p = params.clone();
                p.layers[z].key = m.clone();
                loss_of(&items, &p)
            },
            &params.layers[z].key,
            1e-5,
        );
        let fd_q = finite_difference(
            |m| {
                let mut p = params.clone();
                p.layers[z].query = m.clone();
                loss_of(&items, &p)
            },
            &params.layers[z].query,
            1e-5,
        );
        assert!(relative_error(&g.grad_or_zeros(k), &fd_k) < 1e-4);
        assert!(relative_error(&g.grad_or_zeros(q), &fd_q) < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_output_is_a_convex_combination(seed in any::<u64>(), n in 1usize..6, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_rows(n, d, &mut rng);
        let out = reference_attention(&h, &random_rows(d, d, &mut rng), &random_rows(d, d, &mut rng));
        let mut g = Graph::new();
        let hn = g.constant(Matrix::from_rows(&h).unwrap());
        let k = g.constant(Matrix::from_rows(&random_rows(d, d, &mut rng)).unwrap());
        let q = g.constant(Matrix::from_rows(&random_rows(d, d, &mut rng)).unwrap());
        let got = attention_layer(&mut g, hn, k, q).unwrap();
        for rows in [out, to_rows(g.value(got))] {
            for row in rows {
                for (c, v) in row.iter().enumerate() {
                    let lo = h.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                    let hi = h.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_matrix(3, 4, &mut rng);
        let (wk, wq) = (random_matrix(4, 4, &mut rng), random_matrix(4, 4, &mut rng));
        let mut perm = vec![0, 1, 2];
        perm.shuffle(&mut rng);
        let mut g = Graph::new();
        let (kn, qn) = (g.constant(wk), g.constant(wq));
        let a = g.constant(h.clone());
        let b = g.constant(h.select_rows(&perm));
        let out_a = attention_layer(&mut g, a, kn, qn).unwrap();
        let out_b = attention_layer(&mut g, b, kn, qn).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            prop_assert!(max_gap(g.value(out_b).row(r), g.value(out_a).row(p)) < 1e-12);
        }
    }

    #[test]
    fn identical_rows_are_a_fixed_point(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = random_matrix(1, 4, &mut rng);
        let h = row.select_rows(&vec![0; n]);
        let mut g = Graph::new();
        let hn = g.constant(h.clone());
        let k = g.constant(random_matrix(4, 4, &mut rng).scale(10.0));
        let q = g.constant(random_matrix(4, 4, &mut rng).scale(10.0));
        let out = attention_layer(&mut g, hn, k, q).unwrap();
        prop_assert!(g.value(out).max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn bundle_encoding_is_permutation_invariant(seed in any::<u64>(), n in 1usize..=8, z in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = random_matrix(n, 4, &mut rng);
        let params = BundleEncoderParams { layers: layers(z, 4, &mut rng) };
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = encode_bundle(&items, &params).unwrap();
        let b = encode_bundle(&items.select_rows(&perm), &params).unwrap();
        prop_assert!(max_gap(&a, &b) < 1e-10);
    }
}
