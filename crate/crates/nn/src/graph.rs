//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. [`Graph::backward`] walks the tape in reverse, applying each
//! node's vector-Jacobian product. Graphs are cheap and single-threaded; run
//! one graph per sample and merge the resulting [`Gradients`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::float::Float;
use crate::mask::AttentionMask;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation, for losses that live outside this
/// crate. `backward` returns one optional gradient per input.
pub trait Function<F: Float>: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

/// Geometry of a stride-2, 3×3 convolution over a `(time, channel·freq)`
/// layout. Time is causally left padded by two frames; frequency is not
/// padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub c_in: usize,
    pub f_in: usize,
    pub c_out: usize,
    /// Absolute time index of the first input row.
    pub in_offset: usize,
    /// Absolute time index of the first output row.
    pub out_start: usize,
    pub n_out: usize,
}

impl Conv2dGeometry {
    pub fn f_out(&self) -> usize {
        (self.f_in - 3) / 2 + 1
    }
}

enum Op<F: Float> {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor<F>,
        rstd: Vec<F>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeometry,
        patches: Tensor<F>,
        /// For each patch entry, the flat input index or `usize::MAX` for padding.
        src: Vec<usize>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    PickSum(Var, Vec<(usize, usize)>),
    Custom(Vec<Var>, Arc<dyn Function<F>>),
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Graph<'p, F: Float> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
}

impl<'p, F: Float> Graph<'p, F> {
    /// Graph reading parameters from `store`.
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            param_of: HashMap::new(),
        }
    }

    /// Graph without parameters; only [`Graph::input`] leaves are available.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            param_of: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Constant or differentiable input leaf.
    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.input(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1×m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a single-row bias");
        assert_eq!(av.cols(), bv.cols(), "add_row column mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(F::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    /// `x · σ(x)`
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a), &[a])
    }

    /// Gated linear unit over the column halves: `left ⊙ σ(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.cols() % 2 == 0, "glu needs an even column count");
        let half = av.cols() / 2;
        let mut out = Tensor::zeros(av.rows(), half);
        for r in 0..av.rows() {
            let row = av.row(r);
            for c in 0..half {
                out.set(r, c, row[c] * sigmoid(row[half + c]));
            }
        }
        self.push(out, Op::Glu(a), &[a])
    }

    /// Row-wise layer normalization with learned `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert_eq!(gv.shape(), [1, d], "layer_norm gain shape");
        assert_eq!(bv.shape(), [1, d], "layer_norm bias shape");
        let mut normed = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let dn = F::of(d as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + F::of(eps)).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let z = (row[c] - mean) * rs;
                normed.set(r, c, z);
                out.set(r, c, z * gv.get(0, c) + bv.get(0, c));
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Row softmax; masked entries get exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<&AttentionMask>) -> Var {
        let av = self.value(a);
        if let Some(m) = mask {
            assert_eq!([m.rows(), m.cols()], av.shape(), "mask shape mismatch");
        }
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let ok = |c: usize| mask.is_none_or(|m| m.allowed(r, c));
            let mut mx = F::neg_infinity();
            for (c, &x) in row.iter().enumerate() {
                if ok(c) {
                    mx = mx.max(x);
                }
            }
            let mut z = F::zero();
            let orow = out.row_mut(r);
            for (c, &x) in row.iter().enumerate() {
                if ok(c) {
                    let e = (x - mx).exp();
                    orow[c] = e;
                    z += e;
                }
            }
            orow.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "gather_rows id {id} out of range");
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// `out[i][j] = table.flat[idx[i*cols + j]]`.
    pub fn gather_elems(&mut self, table: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather_elems index count");
        let tv = self.value(table);
        let data = idx.iter().map(|&i| tv.data()[i]).collect();
        let out = Tensor::from_vec(rows, cols, data).expect("sized");
        self.push(out, Op::GatherElems(table, idx), &[table])
    }

    /// Stride-2 3×3 convolution, see [`Conv2dGeometry`]. `w` is
    /// `c_out × (c_in·9)` with inner layout `(ci, kt, kf)`; `b` is `1×c_out`.
    /// Output is `n_out × (c_out·f_out)`.
    pub fn conv2d_s2(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeometry) -> Var {
        let xv = self.value(x);
        let f_out = geom.f_out();
        assert_eq!(xv.cols(), geom.c_in * geom.f_in, "conv2d input width");
        assert_eq!(
            self.value(w).shape(),
            [geom.c_out, geom.c_in * 9],
            "conv2d weight"
        );
        assert_eq!(self.value(b).shape(), [1, geom.c_out], "conv2d bias");
        let pw = geom.c_in * 9;
        let prow = geom.n_out * f_out;
        let mut patches = Tensor::zeros(prow, pw);
        let mut src = vec![usize::MAX; prow * pw];
        for t in 0..geom.n_out {
            let abs_out = geom.out_start + t;
            for kt in 0..3 {
                let abs_in = 2 * abs_out + kt;
                if abs_in < 2 {
                    continue; // causal zero padding before the stream start
                }
                let abs_in = abs_in - 2;
                assert!(
                    abs_in >= geom.in_offset && abs_in - geom.in_offset < xv.rows(),
                    "conv2d input row {abs_in} not provided"
                );
                let r = abs_in - geom.in_offset;
                for fo in 0..f_out {
                    let prow_i = t * f_out + fo;
                    for ci in 0..geom.c_in {
                        for kf in 0..3 {
                            let col = (ci * 3 + kt) * 3 + kf;
                            let flat = r * xv.cols() + ci * geom.f_in + 2 * fo + kf;
                            patches.set(prow_i, col, xv.data()[flat]);
                            src[prow_i * pw + col] = flat;
                        }
                    }
                }
            }
        }
        let y = patches.matmul_nt(self.value(w));
        let bv = self.value(b);
        let mut out = Tensor::zeros(geom.n_out, geom.c_out * f_out);
        for t in 0..geom.n_out {
            for fo in 0..f_out {
                for co in 0..geom.c_out {
                    out.set(
                        t,
                        co * f_out + fo,
                        y.get(t * f_out + fo, co) + bv.get(0, co),
                    );
                }
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                patches,
                src,
            },
            &[x, w, b],
        )
    }

    /// Depthwise temporal convolution. `x` is `(k-1+T)×C` where the first
    /// `k-1` rows are left context; `w` is `k×C`; output is `T×C`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let k = wv.rows();
        let c = xv.cols();
        assert_eq!(wv.cols(), c, "depthwise weight width");
        assert_eq!(bv.shape(), [1, c], "depthwise bias");
        assert!(xv.rows() >= k - 1, "depthwise input shorter than context");
        let t_out = xv.rows() + 1 - k;
        let mut out = Tensor::zeros(t_out, c);
        for t in 0..t_out {
            let orow = out.row_mut(t);
            orow.copy_from_slice(bv.row(0));
            for j in 0..k {
                let xr = xv.row(t + j);
                let wr = wv.row(j);
                for ch in 0..c {
                    orow[ch] += wr[ch] * xr[ch];
                }
            }
        }
        self.push(out, Op::DepthwiseConv { x, w, b }, &[x, w, b])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Sum of selected `(row, col)` entries, as a scalar.
    pub fn pick_sum(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let s = idx.iter().map(|&(r, c)| av.get(r, c)).sum::<F>();
        self.push(Tensor::scalar(s), Op::PickSum(a, idx.to_vec()), &[a])
    }

    /// Records a custom operation whose forward value was computed by the
    /// caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, f: Arc<dyn Function<F>>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), f), inputs)
    }

    /// Runs reverse accumulation from the scalar `loss` and returns the
    /// gradient of every node (`None` where no gradient flows).
    pub fn backward_nodes(&self, loss: Var) -> Vec<Option<Tensor<F>>> {
        let lv = self.value(loss);
        assert_eq!(lv.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    /// Parameter gradients of a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let node_grads = self.backward_nodes(loss);
        let n = self.store.map_or(0, |s| s.len());
        let mut out = Gradients::empty(n);
        for (&node, &pid) in &self.param_of {
            if let Some(g) = &node_grads[node] {
                out.set(pid, g.clone());
            }
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let mut acc = |v: Var, t: Tensor<F>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ ⇒ da = g·b, db = gᵀ·a
                if self.needs(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.scale(-F::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, col_sums(g));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, |gv, xv| if xv > F::zero() { gv } else { F::zero() }),
                );
            }
            Op::Sigmoid(a) => {
                acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (F::one() - y)));
            }
            Op::Tanh(a) => {
                acc(*a, g.zip_map(&node.value, |gv, y| gv * (F::one() - y * y)));
            }
            Op::Swish(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (F::one() - s))
                    }),
                );
            }
            Op::Glu(a) => {
                let x = self.value(*a);
                let half = x.cols() / 2;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    for c in 0..half {
                        let s = sigmoid(row[half + c]);
                        let gv = g.get(r, c);
                        dx.set(r, c, gv * s);
                        dx.set(r, half + c, gv * row[c] * s * (F::one() - s));
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gv = self.value(*gain);
                let (n, d) = (normed.rows(), normed.cols());
                if self.needs(*gain) {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            let v = dg.get(0, c) + g.get(r, c) * normed.get(r, c);
                            dg.set(0, c, v);
                        }
                    }
                    acc(*gain, dg);
                }
                if self.needs(*bias) {
                    acc(*bias, col_sums(g));
                }
                if self.needs(*x) {
                    let dn = F::of(d as f64);
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for c in 0..d {
                            let gz = g.get(r, c) * gv.get(0, c);
                            s1 += gz;
                            s2 += gz * normed.get(r, c);
                        }
                        for c in 0..d {
                            let gz = g.get(r, c) * gv.get(0, c);
                            let v = rstd[r] * (gz - s1 / dn - normed.get(r, c) * s2 / dn);
                            dx.set(r, c, v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: F = g.row(r).iter().copied().sum();
                    for c in 0..y.cols() {
                        dx.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                    }
                }
                acc(*a, dx);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dotv: F = g
                        .row(r)
                        .iter()
                        .zip(y.row(r))
                        .map(|(&gv, &yv)| gv * yv)
                        .sum();
                    for c in 0..y.cols() {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dotv));
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        acc(p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs(p) {
                        acc(p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                let w = av.cols();
                dx.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, dx);
            }
            Op::GatherRows(t, ids) => {
                let tv = self.value(*t);
                let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &gv) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                acc(*t, dt);
            }
            Op::GatherElems(t, idx) => {
                let tv = self.value(*t);
                let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    dt.data_mut()[i] += gv;
                }
                acc(*t, dt);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                patches,
                src,
            } => {
                let f_out = geom.f_out();
                let mut gflat = Tensor::zeros(geom.n_out * f_out, geom.c_out);
                for t in 0..geom.n_out {
                    for fo in 0..f_out {
                        for co in 0..geom.c_out {
                            gflat.set(t * f_out + fo, co, g.get(t, co * f_out + fo));
                        }
                    }
                }
                if self.needs(*w) {
                    acc(*w, gflat.matmul_tn(patches));
                }
                if self.needs(*b) {
                    acc(*b, col_sums(&gflat));
                }
                if self.needs(*x) {
                    let dp = gflat.matmul(self.value(*w));
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (&s, &gv) in src.iter().zip(dp.data()) {
                        if s != usize::MAX {
                            dx.data_mut()[s] += gv;
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::DepthwiseConv { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let k = wv.rows();
                let c = xv.cols();
                if self.needs(*b) {
                    acc(*b, col_sums(g));
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(k, c);
                    for t in 0..g.rows() {
                        for j in 0..k {
                            let xr = xv.row(t + j);
                            let gr = g.row(t);
                            let dr = dw.row_mut(j);
                            for ch in 0..c {
                                dr[ch] += gr[ch] * xr[ch];
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), c);
                    for t in 0..g.rows() {
                        for j in 0..k {
                            let wr = wv.row(j);
                            let gr = g.row(t);
                            let dr = dx.row_mut(t + j);
                            for ch in 0..c {
                                dr[ch] += gr[ch] * wr[ch];
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::full(av.rows(), av.cols(), g.item()));
            }
            Op::PickSum(a, idx) => {
                let av = self.value(*a);
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                let gv = g.item();
                for &(r, c) in idx {
                    let v = dx.get(r, c) + gv;
                    dx.set(r, c, v);
                }
                acc(*a, dx);
            }
            Op::Custom(inputs, f) => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = f.backward(&vals, &node.value, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if self.needs(v) {
                            acc(v, gi);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn col_sums<F: Float>(g: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
