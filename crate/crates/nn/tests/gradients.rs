use u2kws_nn::{
    attention, grad_check, AttentionMask, BlockCache, ChunkSpec, ConformerBlock, ConformerDims,
    ConvSubsample, Embedding, FeedForward, GradCheckOptions, Graph, LayerNorm, Linear, Lstm,
    MultiHeadAttention, NnError, ParamStore, RelPosBias, Tensor, Var,
};

const TOL: f64 = 1e-4;

fn data(rows: usize, cols: usize, salt: u64) -> Tensor<f64> {
    let mut s = salt
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let v = (0..rows * cols)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(rows, cols, v).unwrap()
}

/// Squared error against a fixed target, so every output entry matters.
fn mse(g: &mut Graph<'_, f64>, y: Var, salt: u64) -> Var {
    let [r, c] = g.value(y).shape();
    let target = g.constant(data(r, c, salt));
    let d = g.sub(y, target);
    let sq = g.mul(d, d);
    g.mean(sq)
}

fn check(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NnError>,
) {
    let report = grad_check(store, inputs, GradCheckOptions::default(), f).unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn sum_of_squares() {
    let x = data(3, 4, 1);
    let report = grad_check(
        &ParamStore::new(0),
        &[x],
        GradCheckOptions::default(),
        |g, v| {
            let sq = g.mul(v[0], v[0]);
            Ok(g.sum(sq))
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn non_finite_loss_is_an_error() {
    let x = Tensor::from_f64_rows(&[&[1.0]]).unwrap();
    let r = grad_check(
        &ParamStore::new(0),
        &[x],
        GradCheckOptions::default(),
        |g, v| {
            let inf = g.constant(Tensor::scalar(f64::INFINITY));
            Ok(g.mul(v[0], inf))
        },
    );
    assert!(matches!(r, Err(NnError::NonFinite(_))));
}

#[test]
fn linear_and_activations() {
    let mut store = ParamStore::new(1);
    let lin = Linear::new(&mut store, "l", 4, 6);
    store
        .value_mut(lin.b.unwrap())
        .data_mut()
        .copy_from_slice(data(1, 6, 9).data());
    check(&store, &[data(3, 4, 2)], |g, v| {
        let y = lin.forward(g, v[0]);
        let a = g.sigmoid(y);
        let b = g.tanh(y);
        let c = g.swish(y);
        let ab = g.mul(a, b);
        let s = g.add(ab, c);
        let glu = g.glu(s);
        Ok(mse(g, glu, 3))
    });
}

#[test]
fn embedding_and_log_softmax() {
    let mut store = ParamStore::new(2);
    let emb = Embedding::new(&mut store, "e", 6, 5);
    check(&store, &[], |g, _| {
        let e = emb.forward(g, &[0, 3, 3, 5])?;
        let lp = g.log_softmax(e);
        Ok(g.pick_sum(lp, &[(0, 1), (1, 4), (2, 0), (3, 3)]))
    });
}

#[test]
fn layer_norm() {
    let mut store = ParamStore::new(3);
    let ln = LayerNorm::new(&mut store, "n", 5);
    store
        .value_mut(ln.gain)
        .data_mut()
        .copy_from_slice(data(1, 5, 4).data());
    check(&store, &[data(4, 5, 5)], |g, v| {
        let y = ln.forward(g, v[0]);
        Ok(mse(g, y, 6))
    });
}

#[test]
fn feed_forward() {
    let mut store = ParamStore::new(4);
    let ff = FeedForward::new(&mut store, "f", 4, 7);
    check(&store, &[data(3, 4, 7)], |g, v| {
        let y = ff.forward(g, v[0]);
        Ok(mse(g, y, 8))
    });
}

#[test]
fn single_attention_with_mse() {
    check(
        &ParamStore::new(0),
        &[data(3, 4, 1), data(5, 4, 2), data(5, 3, 3)],
        |g, v| {
            let mask = AttentionMask::from_fn(3, 5, |r, c| c <= r + 2)?;
            let y = attention(g, v[0], v[1], v[2], Some(&mask))?;
            Ok(mse(g, y, 4))
        },
    );
}

#[test]
fn multi_head_attention_with_relative_bias() {
    let mut store = ParamStore::new(5);
    let mha = MultiHeadAttention::new(&mut store, "m", 6, 5, 8, 6, 2).unwrap();
    let rel = RelPosBias::new(&mut store, "r", 2, 3);
    store
        .value_mut(rel.table)
        .data_mut()
        .copy_from_slice(data(2, 7, 11).data());
    check(&store, &[data(4, 6, 9), data(6, 5, 10)], |g, v| {
        let q = mha.q.forward(g, v[0]);
        let (k, vv) = mha.project_kv(g, v[1]);
        let qp = [2, 3, 4, 5];
        let kp = [0, 1, 2, 3, 4, 5];
        let mask = AttentionMask::chunked(&qp, &kp, Some(2), None)?;
        let biases = rel.head_biases(g, &qp, &kp);
        let y = mha.attend(g, q, k, vv, Some(&mask), Some(&biases))?;
        Ok(mse(g, y, 12))
    });
}

#[test]
fn lstm_sequence() {
    let mut store = ParamStore::new(6);
    let lstm = Lstm::new(&mut store, "l", 3, 4);
    check(&store, &[data(5, 3, 13)], |g, v| {
        let h = lstm.forward_seq(g, v[0])?;
        Ok(mse(g, h, 14))
    });
}

#[test]
fn conv_subsample() {
    let mut store = ParamStore::new(7);
    let conv = ConvSubsample::new(&mut store, "c", 9, 2, 4).unwrap();
    for id in [conv.b1, conv.b2] {
        let n = store.value(id).len();
        store
            .value_mut(id)
            .data_mut()
            .copy_from_slice(&vec![0.3; n]);
    }
    check(&store, &[data(11, 9, 15)], |g, v| {
        let y = conv.forward(g, v[0])?;
        Ok(mse(g, y, 16))
    });
}

#[test]
fn conformer_block_with_cache() {
    let mut store = ParamStore::new(8);
    let dims = ConformerDims {
        dim: 8,
        heads: 2,
        ffn: 12,
        kernel: 3,
        max_rel_dist: 4,
    };
    let block = ConformerBlock::new(&mut store, "b", dims).unwrap();
    let mut cache = BlockCache::new(&dims);
    {
        let mut g = Graph::new(&store);
        let x = g.constant(data(2, 8, 17));
        block
            .forward(&mut g, x, &[0, 1], ChunkSpec::chunked(2), Some(&mut cache))
            .unwrap();
    }
    let opts = GradCheckOptions {
        max_per_tensor: Some(24),
        ..Default::default()
    };
    let report = grad_check(&store, &[data(3, 8, 18)], opts, |g, v| {
        let mut c = cache.clone();
        let y = block.forward(g, v[0], &[2, 3, 4], ChunkSpec::chunked(2), Some(&mut c))?;
        Ok(mse(g, y, 19))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}
