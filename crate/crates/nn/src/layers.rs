use crate::error::{NnError, Result};
use crate::float::Float;
use crate::graph::{Conv2dGeometry, Graph, Var};
use crate::mask::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.weight"), in_dim, out_dim);
        let b = store.add_zeros(format!("{name}.bias"), 1, out_dim);
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.weight"), in_dim, out_dim);
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Fixed sinusoidal position table, `rows × dim`: sine in even columns,
/// cosine in odd ones, wavelengths growing geometrically up to 10000·2π.
pub fn sinusoidal_positions<F: Float>(rows: usize, dim: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(rows, dim);
    for p in 0..rows {
        let row = t.row_mut(p);
        for (c, v) in row.iter_mut().enumerate() {
            let angle = p as f64 / 10000f64.powf((c - c % 2) as f64 / dim as f64);
            *v = F::of(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.add_xavier(format!("{name}.table"), vocab, dim);
        Embedding { table, vocab, dim }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(NnError::IdOutOfRange {
                id,
                size: self.vocab,
            });
        }
        let t = g.param(self.table);
        Ok(g.gather_rows(t, ids))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}.gain"), 1, dim),
            bias: store.add_zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, ga, be, Self::EPS)
    }
}

/// Position-wise `Linear → swish → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.swish(h);
        self.down.forward(g, h)
    }
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k + bias)·V`, returning the
/// output and the attention weights.
pub fn attention_with_weights<F: Float>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    if qs[1] != ks[1] {
        return Err(NnError::Shape(format!(
            "query width {} != key width {}",
            qs[1], ks[1]
        )));
    }
    if ks[0] != vs[0] {
        return Err(NnError::Shape(format!(
            "{} keys but {} values",
            ks[0], vs[0]
        )));
    }
    if let Some(m) = mask {
        if [m.rows(), m.cols()] != [qs[0], ks[0]] {
            return Err(NnError::Shape(format!(
                "mask {}x{} for {}x{} scores",
                m.rows(),
                m.cols(),
                qs[0],
                ks[0]
            )));
        }
    }
    if let Some(b) = bias {
        if g.value(b).shape() != [qs[0], ks[0]] {
            return Err(NnError::Shape("attention bias shape".into()));
        }
    }
    let scores = g.matmul_nt(q, k);
    let mut scores = g.scale(scores, F::one() / F::of(qs[1] as f64).sqrt());
    if let Some(b) = bias {
        scores = g.add(scores, b);
    }
    let weights = g.softmax(scores, mask);
    Ok((g.matmul(weights, v), weights))
}

pub fn attention<F: Float>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    attention_with_weights(g, q, k, v, mask, None).map(|(o, _)| o)
}

/// Multi-head attention with separate query and key/value inputs. The
/// internal width `att_dim` is split evenly across heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub att_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        att_dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || att_dim % heads != 0 {
            return Err(NnError::Shape(format!(
                "attention width {att_dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), q_dim, att_dim),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, att_dim),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, att_dim),
            o: Linear::new(store, &format!("{name}.o"), att_dim, out_dim),
            heads,
            att_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.att_dim / self.heads
    }

    pub fn project_kv<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> (Var, Var) {
        (self.k.forward(g, x), self.v.forward(g, x))
    }

    /// Attends projected queries to projected keys/values and applies the
    /// output projection. `head_bias`, when given, holds one additive score
    /// matrix per head.
    pub fn attend<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
        head_bias: Option<&[Var]>,
    ) -> Result<Var> {
        let dh = self.head_dim();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let bias = head_bias.map(|b| b[h]);
            let (o, _) = attention_with_weights(g, qh, kh, vh, mask, bias)?;
            outs.push(o);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        Ok(self.o.forward(g, cat))
    }

    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        x_q: Var,
        x_kv: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let q = self.q.forward(g, x_q);
        let (k, v) = self.project_kv(g, x_kv);
        self.attend(g, q, k, v, mask, None)
    }
}

/// Learned per-head score bias indexed by clipped relative distance
/// `key_pos - query_pos ∈ [-max_dist, max_dist]`.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    pub heads: usize,
    pub max_dist: usize,
}

impl RelPosBias {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        heads: usize,
        max_dist: usize,
    ) -> Self {
        RelPosBias {
            table: store.add_zeros(format!("{name}.table"), heads, 2 * max_dist + 1),
            heads,
            max_dist,
        }
    }

    pub fn head_biases<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        q_pos: &[usize],
        k_pos: &[usize],
    ) -> Vec<Var> {
        let t = g.param(self.table);
        let width = 2 * self.max_dist + 1;
        let r = self.max_dist as i64;
        (0..self.heads)
            .map(|h| {
                let idx = q_pos
                    .iter()
                    .flat_map(|&qp| {
                        k_pos.iter().map(move |&kp| {
                            let d = (kp as i64 - qp as i64).clamp(-r, r) + r;
                            h * width + d as usize
                        })
                    })
                    .collect();
                g.gather_elems(t, idx, q_pos.len(), k_pos.len())
            })
            .collect()
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// `(h, c)`, each `1×hidden`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Lstm {
            w_ih: store.add_uniform(format!("{name}.w_ih"), in_dim, 4 * hidden, bound),
            w_hh: store.add_uniform(format!("{name}.w_hh"), hidden, 4 * hidden, bound),
            b: store.add_uniform(format!("{name}.bias"), 1, 4 * hidden, bound),
            in_dim,
            hidden,
        }
    }

    pub fn zero_state<F: Float>(&self, g: &mut Graph<'_, F>) -> LstmState {
        let h = g.constant(crate::Tensor::zeros(1, self.hidden));
        let c = g.constant(crate::Tensor::zeros(1, self.hidden));
        LstmState { h, c }
    }

    /// One recurrence step; `x_t` is `1×in_dim`. The output equals the new `h`.
    pub fn step<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        x_t: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        if g.value(x_t).shape() != [1, self.in_dim] {
            return Err(NnError::Shape(format!(
                "lstm input {:?}, expected [1, {}]",
                g.value(x_t).shape(),
                self.in_dim
            )));
        }
        let w_ih = g.param(self.w_ih);
        let xz = g.matmul(x_t, w_ih);
        self.step_projected(g, xz, state)
    }

    /// Step with the input projection `x_t·W_ih` already computed.
    fn step_projected<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        xz: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let hd = self.hidden;
        for v in [state.h, state.c] {
            if g.value(v).shape() != [1, hd] {
                return Err(NnError::Shape(format!(
                    "lstm state {:?}, expected [1, {hd}]",
                    g.value(v).shape()
                )));
            }
        }
        let (w_hh, b) = (g.param(self.w_hh), g.param(self.b));
        let hz = g.matmul(state.h, w_hh);
        let z = g.add(xz, hz);
        let z = g.add_row(z, b);
        let i = g.slice_cols(z, 0, hd);
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, hd, hd);
        let f = g.sigmoid(f);
        let c_hat = g.slice_cols(z, 2 * hd, hd);
        let c_hat = g.tanh(c_hat);
        let o = g.slice_cols(z, 3 * hd, hd);
        let o = g.sigmoid(o);
        let fc = g.mul(f, state.c);
        let ic = g.mul(i, c_hat);
        let c = g.add(fc, ic);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        Ok(LstmState { h, c })
    }

    /// Runs over all rows of `x` (`L×in_dim`) from a zero state and returns the
    /// stacked hidden states (`L×hidden`).
    pub fn forward_seq<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let [l, d] = g.value(x).shape();
        if d != self.in_dim || l == 0 {
            return Err(NnError::Shape(format!(
                "lstm sequence {l}x{d}, expected non-empty Lx{}",
                self.in_dim
            )));
        }
        let w_ih = g.param(self.w_ih);
        let xz_all = g.matmul(x, w_ih);
        let mut state = self.zero_state(g);
        let mut outs = Vec::with_capacity(l);
        for t in 0..l {
            let xz = g.slice_rows(xz_all, t, 1);
            state = self.step_projected(g, xz, state)?;
            outs.push(state.h);
        }
        Ok(if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_rows(&outs)
        })
    }
}

/// Two stride-2 3×3 convolutions with ReLU, then a linear projection to the
/// model width. Time is left padded by two frames per convolution (causal),
/// frequency is unpadded. For `T` input frames the output length is
/// `⌊(⌊(T−1)/2⌋)/2⌋ + 1`; output frame `u` reads input frames `4u−6 ..= 4u`.
#[derive(Clone, Debug)]
pub struct ConvSubsample {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub out: Linear,
    pub feat_dim: usize,
    pub channels: usize,
}

impl ConvSubsample {
    pub const MIN_FRAMES: usize = 7;
    /// Input frames of look-back needed before output frame `u`'s `4u` row.
    pub const CONTEXT: usize = 6;

    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        feat_dim: usize,
        channels: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if feat_dim < 7 {
            return Err(NnError::Shape(format!(
                "feature dim {feat_dim} too small for two stride-2 convolutions"
            )));
        }
        let f2 = Self::freq_out(feat_dim);
        let w1 = store.add_uniform(
            format!("{name}.conv1.weight"),
            channels,
            9,
            (6.0 / (9.0 + 9.0 * channels as f64)).sqrt(),
        );
        let b1 = store.add_zeros(format!("{name}.conv1.bias"), 1, channels);
        let fan = 9.0 * channels as f64;
        let w2 = store.add_uniform(
            format!("{name}.conv2.weight"),
            channels,
            channels * 9,
            (6.0 / (2.0 * fan)).sqrt(),
        );
        let b2 = store.add_zeros(format!("{name}.conv2.bias"), 1, channels);
        let out = Linear::new(store, &format!("{name}.out"), channels * f2, out_dim);
        Ok(ConvSubsample {
            w1,
            b1,
            w2,
            b2,
            out,
            feat_dim,
            channels,
        })
    }

    pub fn freq_out(feat_dim: usize) -> usize {
        let f1 = (feat_dim - 3) / 2 + 1;
        (f1 - 3) / 2 + 1
    }

    pub fn output_len(frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) / 4 + 1
        }
    }

    /// Whole-utterance forward.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let t = g.value(x).rows();
        if t < Self::MIN_FRAMES {
            return Err(NnError::TooShort {
                got: t,
                need: Self::MIN_FRAMES,
            });
        }
        self.forward_range(g, x, 0, 0, Self::output_len(t))
    }

    /// Computes output frames `out_start .. out_start + n_out` from input rows
    /// beginning at absolute frame `in_offset`. The rows must cover
    /// `max(0, 4·out_start − 6) ..= 4·(out_start + n_out − 1)`.
    pub fn forward_range<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        in_offset: usize,
        out_start: usize,
        n_out: usize,
    ) -> Result<Var> {
        let xv = g.value(x);
        if xv.cols() != self.feat_dim {
            return Err(NnError::Shape(format!(
                "features have {} bins, expected {}",
                xv.cols(),
                self.feat_dim
            )));
        }
        let last_needed = 4 * (out_start + n_out - 1);
        let first_needed = (4 * out_start).saturating_sub(Self::CONTEXT);
        if in_offset > first_needed || in_offset + xv.rows() <= last_needed {
            return Err(NnError::TooShort {
                got: xv.rows(),
                need: last_needed + 1 - first_needed.min(in_offset),
            });
        }
        let t1_start = (2 * out_start).saturating_sub(2);
        let t1_end = 2 * (out_start + n_out - 1);
        let f1 = (self.feat_dim - 3) / 2 + 1;
        let (w1, b1) = (g.param(self.w1), g.param(self.b1));
        let h1 = g.conv2d_s2(
            x,
            w1,
            b1,
            Conv2dGeometry {
                c_in: 1,
                f_in: self.feat_dim,
                c_out: self.channels,
                in_offset,
                out_start: t1_start,
                n_out: t1_end + 1 - t1_start,
            },
        );
        let h1 = g.relu(h1);
        let (w2, b2) = (g.param(self.w2), g.param(self.b2));
        let h2 = g.conv2d_s2(
            h1,
            w2,
            b2,
            Conv2dGeometry {
                c_in: self.channels,
                f_in: f1,
                c_out: self.channels,
                in_offset: t1_start,
                out_start,
                n_out,
            },
        );
        let h2 = g.relu(h2);
        Ok(self.out.forward(g, h2))
    }
}
