//! Simplified conformer block: half-step feed-forward, relative-position
//! multi-head self-attention, causal depthwise convolution module, second
//! half-step feed-forward, final layer norm. Every sub-module is pre-norm
//! with a residual connection.

use crate::error::Result;
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention, RelPosBias};
use crate::mask::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConformerDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub kernel: usize,
    pub max_rel_dist: usize,
}

/// Which keys a frame may attend to. `chunk = None` is full attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ChunkSpec {
    pub chunk: Option<usize>,
    pub left_chunks: Option<usize>,
}

impl ChunkSpec {
    pub fn full() -> Self {
        ChunkSpec::default()
    }

    pub fn chunked(chunk: usize) -> Self {
        ChunkSpec {
            chunk: Some(chunk),
            left_chunks: None,
        }
    }
}

/// Streaming state of one block: projected keys/values of past frames and
/// the last `kernel − 1` inputs of the depthwise convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCache<F> {
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
    pub positions: Vec<usize>,
    pub conv_context: Tensor<F>,
}

impl<F: Float> BlockCache<F> {
    pub fn new(dims: &ConformerDims) -> Self {
        BlockCache {
            keys: Tensor::zeros(0, dims.dim),
            values: Tensor::zeros(0, dims.dim),
            positions: Vec::new(),
            conv_context: Tensor::zeros(dims.kernel - 1, dims.dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub dims: ConformerDims,
    ffn1_norm: LayerNorm,
    ffn1: FeedForward,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    rel: RelPosBias,
    conv_norm: LayerNorm,
    conv_in: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    conv_out: Linear,
    ffn2_norm: LayerNorm,
    ffn2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: ConformerDims,
    ) -> Result<Self> {
        let d = dims.dim;
        Ok(ConformerBlock {
            dims,
            ffn1_norm: LayerNorm::new(store, &format!("{name}.ffn1_norm"), d),
            ffn1: FeedForward::new(store, &format!("{name}.ffn1"), d, dims.ffn),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, d, d, dims.heads)?,
            rel: RelPosBias::new(store, &format!("{name}.rel"), dims.heads, dims.max_rel_dist),
            conv_norm: LayerNorm::new(store, &format!("{name}.conv_norm"), d),
            conv_in: Linear::new(store, &format!("{name}.conv_in"), d, 2 * d),
            conv_w: store.add_uniform(
                format!("{name}.conv_dw.weight"),
                dims.kernel,
                d,
                1.0 / (dims.kernel as f64).sqrt(),
            ),
            conv_b: store.add_zeros(format!("{name}.conv_dw.bias"), 1, d),
            conv_out: Linear::new(store, &format!("{name}.conv_out"), d, d),
            ffn2_norm: LayerNorm::new(store, &format!("{name}.ffn2_norm"), d),
            ffn2: FeedForward::new(store, &format!("{name}.ffn2"), d, dims.ffn),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
        })
    }

    /// Runs the block over frames at absolute `positions`. With a cache, the
    /// new frames attend to cached history as well and the cache is advanced.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        positions: &[usize],
        spec: ChunkSpec,
        cache: Option<&mut BlockCache<F>>,
    ) -> Result<Var> {
        let half = F::of(0.5);

        let h = self.ffn1_norm.forward(g, x);
        let h = self.ffn1.forward(g, h);
        let h = g.scale(h, half);
        let x1 = g.add(x, h);

        let xn = self.attn_norm.forward(g, x1);
        let q = self.attn.q.forward(g, xn);
        let (k_new, v_new) = self.attn.project_kv(g, xn);
        let (k, v, key_pos) = match cache.as_deref() {
            Some(c) if !c.positions.is_empty() => {
                let kc = g.constant(c.keys.clone());
                let vc = g.constant(c.values.clone());
                let k = g.concat_rows(&[kc, k_new]);
                let v = g.concat_rows(&[vc, v_new]);
                let mut kp = c.positions.clone();
                kp.extend_from_slice(positions);
                (k, v, kp)
            }
            _ => (k_new, v_new, positions.to_vec()),
        };
        let mask = AttentionMask::chunked(positions, &key_pos, spec.chunk, spec.left_chunks)?;
        let biases = self.rel.head_biases(g, positions, &key_pos);
        let att = self.attn.attend(g, q, k, v, Some(&mask), Some(&biases))?;
        let x2 = g.add(x1, att);

        let cn = self.conv_norm.forward(g, x2);
        let cz = self.conv_in.forward(g, cn);
        let glu = g.glu(cz);
        let ctx_t = match cache.as_deref() {
            Some(c) => c.conv_context.clone(),
            None => Tensor::zeros(self.dims.kernel - 1, self.dims.dim),
        };
        let ctx = g.constant(ctx_t);
        let padded = g.concat_rows(&[ctx, glu]);
        let (cw, cb) = (g.param(self.conv_w), g.param(self.conv_b));
        let dw = g.depthwise_conv(padded, cw, cb);
        let dw = g.swish(dw);
        let conv = self.conv_out.forward(g, dw);
        let x3 = g.add(x2, conv);

        let h = self.ffn2_norm.forward(g, x3);
        let h = self.ffn2.forward(g, h);
        let h = g.scale(h, half);
        let x4 = g.add(x3, h);
        let out = self.final_norm.forward(g, x4);

        if let Some(c) = cache {
            let keys = Tensor::concat_rows(&[&c.keys, g.value(k_new)]);
            let values = Tensor::concat_rows(&[&c.values, g.value(v_new)]);
            c.positions.extend_from_slice(positions);
            c.keys = keys;
            c.values = values;
            if let (Some(chunk), Some(left)) = (spec.chunk, spec.left_chunks) {
                let newest = *c.positions.last().expect("non-empty") / chunk;
                let keep_from = c
                    .positions
                    .iter()
                    .position(|&p| p / chunk + left >= newest)
                    .unwrap_or(c.positions.len());
                if keep_from > 0 {
                    let n = c.positions.len() - keep_from;
                    c.keys = c.keys.slice_rows(keep_from, n);
                    c.values = c.values.slice_rows(keep_from, n);
                    c.positions.drain(..keep_from);
                }
            }
            let pv = g.value(padded);
            let k1 = self.dims.kernel - 1;
            c.conv_context = pv.slice_rows(pv.rows() - k1, k1);
        }
        Ok(out)
    }
}
