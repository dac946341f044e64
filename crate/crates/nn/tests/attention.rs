use proptest::prelude::*;
use u2kws_nn::{
    attention, attention_with_weights, AttentionMask, Graph, MultiHeadAttention, ParamStore, Tensor,
};

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_f64_rows(rows).unwrap()
}

fn run(
    q: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
    mask: Option<&AttentionMask>,
) -> Tensor<f64> {
    let mut g = Graph::detached();
    let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
    let out = attention(&mut g, q, k, v, mask).unwrap();
    g.value(out).clone()
}

#[test]
fn single_key_returns_its_value() {
    let out = run(
        t(&[&[0.3, -2.0], &[5.0, 1.0]]),
        t(&[&[1.0, 1.0]]),
        t(&[&[4.0, -7.5, 0.25]]),
        None,
    );
    for r in 0..2 {
        assert_eq!(out.row(r), &[4.0, -7.5, 0.25]);
    }
}

#[test]
fn identical_keys_average_values() {
    let out = run(
        t(&[&[0.7, -0.1]]),
        t(&[&[1.0, 2.0], &[1.0, 2.0]]),
        t(&[&[2.0, 0.0], &[4.0, 6.0]]),
        None,
    );
    assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
    assert!((out.get(0, 1) - 3.0).abs() < 1e-12);
}

#[test]
fn hand_evaluated_two_key_example() {
    // scores [1/√2, 0]; weight on the first key is 1 / (1 + e^{-1/√2})
    let expected = 1.0 / (1.0 + (-std::f64::consts::FRAC_1_SQRT_2).exp());
    assert!((expected - 0.669_761_549_326_656_9).abs() < 1e-15);
    let out = run(
        t(&[&[1.0, 0.0]]),
        t(&[&[1.0, 0.0], &[0.0, 1.0]]),
        t(&[&[1.0], &[0.0]]),
        None,
    );
    assert!((out.item() - expected).abs() < 1e-12);
}

#[test]
fn shape_errors() {
    let mut g = Graph::<f64>::detached();
    let q = g.constant(Tensor::zeros(2, 3));
    let k = g.constant(Tensor::zeros(4, 2));
    let v = g.constant(Tensor::zeros(4, 1));
    assert!(attention(&mut g, q, k, v, None).is_err());
    let k = g.constant(Tensor::zeros(4, 3));
    let v = g.constant(Tensor::zeros(5, 1));
    assert!(attention(&mut g, q, k, v, None).is_err());
    let v = g.constant(Tensor::zeros(4, 1));
    let mask = AttentionMask::causal(3);
    assert!(attention(&mut g, q, k, v, Some(&mask)).is_err());
}

#[test]
fn all_masked_row_is_rejected() {
    assert!(AttentionMask::new(2, 2, vec![true, false, false, false]).is_err());
}

#[test]
fn indivisible_heads_is_an_error() {
    let mut store = ParamStore::<f64>::new(0);
    assert!(MultiHeadAttention::new(&mut store, "m", 6, 6, 6, 6, 4).is_err());
}

fn set(store: &mut ParamStore<f64>, id: u2kws_nn::ParamId, value: Tensor<f64>) {
    *store.value_mut(id) = value;
}

fn identity(n: usize) -> Tensor<f64> {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

#[test]
fn one_head_identity_projections_is_plain_attention() {
    let mut store = ParamStore::<f64>::new(3);
    let mha = MultiHeadAttention::new(&mut store, "m", 3, 3, 3, 3, 1).unwrap();
    for lin in [&mha.q, &mha.k, &mha.v, &mha.o] {
        set(&mut store, lin.w, identity(3));
    }
    let xq = t(&[&[0.1, 0.5, -1.0], &[2.0, 0.0, 0.3]]);
    let xkv = t(&[&[1.0, -1.0, 0.5], &[0.2, 0.2, 0.2], &[-0.4, 1.5, 0.0]]);
    let mut g = Graph::new(&store);
    let (a, b) = (g.constant(xq.clone()), g.constant(xkv.clone()));
    let out = mha.forward(&mut g, a, b, None).unwrap();
    let plain = run(xq, xkv.clone(), xkv, None);
    assert!(g.value(out).max_abs_diff(&plain) < 1e-12);
}

#[test]
fn zero_output_projection_gives_zero() {
    let mut store = ParamStore::<f64>::new(5);
    let mha = MultiHeadAttention::new(&mut store, "m", 4, 4, 4, 4, 2).unwrap();
    set(&mut store, mha.o.w, Tensor::zeros(4, 4));
    let mut g = Graph::new(&store);
    let x = g.constant(t(&[&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.0, 9.0, 2.0]]));
    let out = mha.forward(&mut g, x, x, None).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

/// Loop-based multi-head attention over raw parameter values.
fn reference_mha(
    store: &ParamStore<f64>,
    mha: &MultiHeadAttention,
    x: &Tensor<f64>,
) -> Vec<Vec<f64>> {
    let lin = |l: &u2kws_nn::Linear, x: &Tensor<f64>| -> Vec<Vec<f64>> {
        let w = store.value(l.w);
        let b = store.value(l.b.unwrap());
        (0..x.rows())
            .map(|r| {
                (0..l.out_dim)
                    .map(|c| {
                        b.get(0, c)
                            + (0..l.in_dim)
                                .map(|i| x.get(r, i) * w.get(i, c))
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (lin(&mha.q, x), lin(&mha.k, x), lin(&mha.v, x));
    let dh = mha.head_dim();
    let n = x.rows();
    let mut cat = Tensor::zeros(n, mha.att_dim);
    for h in 0..mha.heads {
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| q[i][h * dh + c] * k[j][h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..dh {
                let val: f64 = (0..n)
                    .map(|j| (s[j] - m).exp() / z * v[j][h * dh + c])
                    .sum();
                cat.set(i, h * dh + c, val);
            }
        }
    }
    lin(&mha.o, &cat)
}

#[test]
fn two_heads_match_loop_reference() {
    let mut store = ParamStore::<f64>::new(11);
    let mha = MultiHeadAttention::new(&mut store, "m", 8, 8, 8, 8, 2).unwrap();
    for lin in [&mha.q, &mha.k, &mha.v, &mha.o] {
        let b = lin.b.unwrap();
        let vals: Vec<f64> = (0..8).map(|i| 0.05 * i as f64 - 0.2).collect();
        set(&mut store, b, Tensor::from_vec(1, 8, vals).unwrap());
    }
    let x = Tensor::from_vec(
        4,
        8,
        (0..32)
            .map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0)
            .collect(),
    )
    .unwrap();
    let expected = reference_mha(&store, &mha, &x);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let out = mha.forward(&mut g, xv, xv, None).unwrap();
    for (r, row) in expected.iter().enumerate() {
        for (c, &e) in row.iter().enumerate() {
            assert!((g.value(out).get(r, c) - e).abs() < 1e-12, "({r},{c})");
        }
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-4.0f64..4.0, rows * cols)
        .prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn weights_normalize_and_masked_entries_are_zero(
        (q, k, bits) in (1usize..5, 1usize..6, 1usize..4).prop_flat_map(|(n, m, d)| {
            (matrix(n, d), matrix(m, d), prop::collection::vec(any::<bool>(), n * m))
        })
    ) {
        let (n, m) = (q.rows(), k.rows());
        let mut allowed = bits;
        for r in 0..n {
            allowed[r * m + r % m] = true;
        }
        let mask = AttentionMask::new(n, m, allowed.clone()).unwrap();
        let mut g = Graph::detached();
        let (qv, kv) = (g.constant(q), g.constant(k.clone()));
        let vv = g.constant(k);
        let (_, w) = attention_with_weights(&mut g, qv, kv, vv, Some(&mask), None).unwrap();
        let w = g.value(w);
        for r in 0..n {
            let s: f64 = w.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for c in 0..m {
                if !allowed[r * m + c] {
                    prop_assert_eq!(w.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic(q in matrix(3, 4), k in matrix(5, 4)) {
        let a = run(q.clone(), k.clone(), k.clone(), None);
        let b = run(q, k.clone(), k, None);
        prop_assert_eq!(a, b);
    }
}
