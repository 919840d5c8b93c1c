//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that transitively depends on a trainable parameter (or an
//! input explicitly marked as requiring a gradient). Frozen parameters never
//! require gradients, so whole frozen subgraphs are skipped.
//!
//! Tensors are interpreted as matrices: the last axis is the column axis and
//! every other axis folds into rows.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatView, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rows of one attention problem inside the packed query / key-value matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    /// Self-attention inside the vision-language backbone.
    Backbone,
    /// Action tokens attending to a conditioning sequence.
    Cross,
    /// Action tokens attending to themselves.
    SelfAction,
    /// Standalone use outside a model.
    Generic,
}

/// Structural record of one attention operation.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub node: Var,
    pub kind: AttnKind,
    /// Pre-projection tensor the queries were computed from.
    pub query_source: Var,
    /// Pre-projection tensor the keys and values were computed from.
    pub kv_source: Var,
    pub heads: usize,
    pub segments: Vec<AttnSegment>,
}

struct AttnNode<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<AttnSegment>,
    /// Per segment, per head, a q_len × kv_len row-stochastic block.
    probs: Vec<T>,
    offsets: Vec<usize>,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Normalize { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Attention(Box<AttnNode<T>>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    Square(Var),
    Mean(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    params: HashMap<ParamId, Tensor<T>>,
    vars: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor<T>> {
        &self.params
    }

    /// Gradient for `id`, or zeros shaped like the parameter when it did not
    /// take part in the graph (frozen or unused).
    pub fn param_or_zeros(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }

    pub fn global_norm(&self) -> T {
        self.norm_where(|_| true)
    }

    /// L2 norm over the parameters selected by `keep`, summed in id order.
    pub fn norm_where(&self, keep: impl Fn(ParamId) -> bool) -> T {
        let mut ids: Vec<_> = self.params.keys().copied().filter(|&id| keep(id)).collect();
        ids.sort();
        ids.iter()
            .flat_map(|id| self.params[id].data().iter())
            .map(|&g| g * g)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        self.scale_where(s, |_| true);
    }

    pub fn scale_where(&mut self, s: T, keep: impl Fn(ParamId) -> bool) {
        for (id, g) in self.params.iter_mut() {
            if keep(*id) {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    attn: Vec<AttnRecord>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let val = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (val, d)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            attn: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never requires gradients (inference only).
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is reported by [`Grads::var`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        let grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding the current value of a stored parameter. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let requires_grad = self.grad_enabled && !store.is_frozen(id);
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn attention_records(&self) -> &[AttnRecord] {
        &self.attn
    }

    /// Attention probabilities of an attention node: per segment, per head,
    /// a row-major `q_len × kv_len` block.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], &[AttnSegment], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention(a) => Some((&a.probs, &a.segments, a.heads)),
            _ => None,
        }
    }

    /// Head-averaged attention matrix of one segment.
    pub fn attention_map(&self, v: Var, segment: usize) -> Option<Tensor<T>> {
        let a = match &self.nodes[v.0].op {
            Op::Attention(a) => a,
            _ => return None,
        };
        let seg = *a.segments.get(segment)?;
        let block = seg.q_len * seg.kv_len;
        let mut out = Tensor::zeros(&[seg.q_len, seg.kv_len]);
        let inv = T::one() / T::lit(a.heads as f64);
        for h in 0..a.heads {
            let off = a.offsets[segment] + h * block;
            for (o, p) in out.data_mut().iter_mut().zip(&a.probs[off..off + block]) {
                *o += *p * inv;
            }
        }
        Some(out)
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            av.data(),
            MatView::dense(m, k),
            bv.data(),
            MatView::dense(k, n),
            out.data_mut(),
            MatView::dense(m, n),
            false,
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(vec![av.rows(), av.cols()], data).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, r: Var) -> Result<()> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.len() != xv.cols() {
            return Err(shape_err(op, xv.shape(), rv.shape()));
        }
        Ok(())
    }

    /// `x + r` with `r` (length = cols) broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, r)?;
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        let mut out = Tensor::new(vec![xv.rows(), c], xv.data().to_vec())?;
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(rv.data()) {
                *o += *b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, r), &[x, r]))
    }

    /// `x ⊙ r` with `r` (length = cols) broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, r)?;
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        let mut out = Tensor::new(vec![xv.rows(), c], xv.data().to_vec())?;
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(rv.data()) {
                *o *= *b;
            }
        }
        Ok(self.push(out, Op::MulRow(x, r), &[x, r]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// Per-row standardization with the biased (1/d) variance.
    pub fn normalize(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[r, c]);
        let mut rstd = Vec::with_capacity(r);
        let inv_d = T::one() / T::lit(c as f64);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push(out, Op::Normalize { x, rstd }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Scaled dot-product attention over packed segments.
    ///
    /// `q` is `[Σ q_len, d]`, `k` and `v` are `[Σ kv_len, d]`; each segment
    /// is an independent problem. Per head the output is
    /// `softmax(Q Kᵀ / √(d/heads)) V`, heads concatenated along columns.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        kind: AttnKind,
        sources: (Var, Var),
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for s in &segments {
            if s.q_start + s.q_len > qv.rows() || s.kv_start + s.kv_len > kv.rows() {
                return Err(Error::InvalidArgument(format!("attention segment {s:?} out of range")));
            }
            if s.kv_len == 0 && s.q_len > 0 {
                return Err(Error::InvalidArgument(
                    "attention segment with queries but no keys".into(),
                ));
            }
            offsets.push(total);
            total += heads * s.q_len * s.kv_len;
        }
        let mut probs = vec![T::zero(); total];
        let mut out = Tensor::zeros(&[qv.rows(), d]);
        for (si, s) in segments.iter().enumerate() {
            let block = s.q_len * s.kv_len;
            for h in 0..heads {
                let p = &mut probs[offsets[si] + h * block..offsets[si] + (h + 1) * block];
                let qview = head_view(s.q_start, s.q_len, h, dh, d);
                let kview = head_view(s.kv_start, s.kv_len, h, dh, d);
                gemm(
                    qv.data(),
                    qview,
                    kv.data(),
                    kview.t(),
                    p,
                    MatView::dense(s.q_len, s.kv_len),
                    false,
                );
                for row in p.chunks_mut(s.kv_len.max(1)) {
                    softmax_in_place(row, scale);
                }
                gemm(
                    p,
                    MatView::dense(s.q_len, s.kv_len),
                    vv.data(),
                    head_view(s.kv_start, s.kv_len, h, dh, d),
                    out.data_mut(),
                    qview,
                    false,
                );
            }
        }
        let node = AttnNode {
            q,
            k,
            v,
            heads,
            segments: segments.clone(),
            probs,
            offsets,
        };
        let var = self.push(out, Op::Attention(Box::new(node)), &[q, k, v]);
        self.attn.push(AttnRecord {
            node: var,
            kind,
            query_source: sources.0,
            kv_source: sources.1,
            heads,
            segments,
        });
        Ok(var)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather row {bad} out of {} rows",
                xv.rows()
            )));
        }
        let out = xv.select_rows(&idx);
        Ok(self.push(out, Op::GatherRows(x, idx), &[x]))
    }

    /// Output row `j` is the concatenation of input rows
    /// `idx[j*g .. (j+1)*g]`, where `g = idx.len() / out_rows`.
    pub fn group_rows(&mut self, x: Var, idx: Vec<usize>, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || !idx.len().is_multiple_of(group) || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::InvalidArgument("bad row grouping".into()));
        }
        let c = xv.cols();
        let rows = idx.len() / group;
        let out = xv.select_rows(&idx).reshape(&[rows, group * c])?;
        Ok(self.push(out, Op::GroupRows(x, idx), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.cols() {
            return Err(shape_err("slice_cols", xv.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(xv.rows() * width);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![xv.rows(), width], data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    /// Each row repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * n);
        for i in 0..xv.rows() {
            for _ in 0..n {
                data.extend_from_slice(xv.row(i));
            }
        }
        let out = Tensor::new(vec![xv.rows() * n, xv.cols()], data).expect("shape");
        self.push(out, Op::RepeatRows(x, n), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().copied().sum::<T>() / T::lit(xv.len().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- composites -------------------------------------------------------

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.normalize(x, eps);
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    // ---- reverse pass -----------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params = HashMap::new();
        for (id, v) in &self.params {
            if let Some(g) = grads[..].get(v.0).and_then(Option::as_ref) {
                params.insert(*id, g.clone());
            }
        }
        Ok(Grads { params, vars: grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.buf(grads, *a) {
                    gemm(
                        gd,
                        MatView::dense(m, n),
                        bv.data(),
                        MatView::dense(k, n).t(),
                        ga.data_mut(),
                        MatView::dense(m, k),
                        true,
                    );
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm(
                        av.data(),
                        MatView::dense(m, k).t(),
                        gd,
                        MatView::dense(m, n),
                        gb.data_mut(),
                        MatView::dense(k, n),
                        true,
                    );
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if let Some(gv) = self.buf(grads, v) {
                        axpy(gv.data_mut(), gd, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(gv) = self.buf(grads, v) {
                        axpy(gv.data_mut(), gd, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.buf(grads, *a) {
                    for ((o, &gg), &y) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gg * y;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((o, &gg), &x) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += gg * x;
                    }
                }
            }
            Op::AddRow(x, r) => {
                let c = g.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx.data_mut(), gd, T::one());
                }
                if let Some(gr) = self.buf(grads, *r) {
                    for row in gd.chunks(c.max(1)) {
                        axpy(gr.data_mut(), row, T::one());
                    }
                }
            }
            Op::MulRow(x, r) => {
                let c = g.cols();
                let (xv, rv) = (self.value(*x).data(), self.value(*r).data());
                if let Some(gx) = self.buf(grads, *x) {
                    for (orow, grow) in gx.data_mut().chunks_mut(c).zip(gd.chunks(c)) {
                        for ((o, &gg), &s) in orow.iter_mut().zip(grow).zip(rv) {
                            *o += gg * s;
                        }
                    }
                }
                if let Some(gr) = self.buf(grads, *r) {
                    let grd = gr.data_mut();
                    for (grow, xrow) in gd.chunks(c).zip(xv.chunks(c)) {
                        for ((o, &gg), &xx) in grd.iter_mut().zip(grow).zip(xrow) {
                            *o += gg * xx;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx.data_mut(), gd, *s);
                }
            }
            Op::AddConst(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx.data_mut(), gd, T::one());
                }
            }
            Op::Normalize { x, rstd } => {
                let y = &node.value;
                let c = y.cols();
                let inv_d = T::one() / T::lit(c as f64);
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for ((o, &gg), &yy) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += rs * (gg - mean_g - yy * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &gg), &xx) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        *o += gg * gelu_parts(xx).1;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &gg), &xx) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid(xx);
                        *o += gg * s * (T::one() + xx * (T::one() - s));
                    }
                }
            }
            Op::Attention(a) => self.backprop_attention(a, gd, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.buf(grads, *p) {
                        axpy(gp.data_mut(), &gd[off..off + len], T::one());
                    }
                    off += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = g.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (j, &src) in idx.iter().enumerate() {
                        axpy(gx.row_mut(src), &gd[j * c..(j + 1) * c], T::one());
                    }
                }
            }
            Op::GroupRows(x, idx) => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (j, &src) in idx.iter().enumerate() {
                        axpy(gx.row_mut(src), &gd[j * c..(j + 1) * c], T::one());
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let w = g.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for r in 0..g.rows() {
                        axpy(
                            &mut gx.row_mut(r)[*start..*start + w],
                            &gd[r * w..(r + 1) * w],
                            T::one(),
                        );
                    }
                }
            }
            Op::RepeatRows(x, n) => {
                let c = g.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, grow) in gd.chunks(c).enumerate() {
                        axpy(gx.row_mut(r / n), grow, T::one());
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &gg), &xx) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        *o += T::lit(2.0) * gg * xx;
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len().max(1) as f64);
                if let Some(gx) = self.buf(grads, *x) {
                    let s = gd[0] / n;
                    gx.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    let s = gd[0];
                    gx.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
        }
        Ok(())
    }

    fn backprop_attention(&self, a: &AttnNode<T>, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (qv, kv, vv) = (self.value(a.q), self.value(a.k), self.value(a.v));
        let d = qv.cols();
        let dh = d / a.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let need_q = self.nodes[a.q.0].requires_grad;
        let need_k = self.nodes[a.k.0].requires_grad;
        let need_v = self.nodes[a.v.0].requires_grad;
        let mut dp = Vec::new();
        for (si, s) in a.segments.iter().enumerate() {
            let block = s.q_len * s.kv_len;
            if block == 0 {
                continue;
            }
            for h in 0..a.heads {
                let p = &a.probs[a.offsets[si] + h * block..a.offsets[si] + (h + 1) * block];
                let pview = MatView::dense(s.q_len, s.kv_len);
                let qview = head_view(s.q_start, s.q_len, h, dh, d);
                let kview = head_view(s.kv_start, s.kv_len, h, dh, d);
                if need_v {
                    let gv = self.buf(grads, a.v).expect("requires grad");
                    gemm(p, pview.t(), gd, qview, gv.data_mut(), kview, true);
                }
                if !(need_q || need_k) {
                    continue;
                }
                dp.clear();
                dp.resize(block, T::zero());
                gemm(gd, qview, vv.data(), kview.t(), &mut dp, pview, false);
                for (dr, pr) in dp.chunks_mut(s.kv_len).zip(p.chunks(s.kv_len)) {
                    let dot = dr.iter().zip(pr).map(|(&x, &y)| x * y).sum::<T>();
                    for (x, &y) in dr.iter_mut().zip(pr) {
                        *x = y * (*x - dot) * scale;
                    }
                }
                if need_q {
                    let gq = self.buf(grads, a.q).expect("requires grad");
                    gemm(&dp, pview, kv.data(), kview, gq.data_mut(), qview, true);
                }
                if need_k {
                    let gk = self.buf(grads, a.k).expect("requires grad");
                    gemm(&dp, pview.t(), qv.data(), qview, gk.data_mut(), kview, true);
                }
            }
        }
    }
}

fn head_view(row_start: usize, rows: usize, head: usize, dh: usize, d: usize) -> MatView {
    MatView {
        offset: row_start * d + head * dh,
        rows,
        cols: dh,
        rs: d as isize,
        cs: 1,
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// Numerically stable in-place softmax of `scale · row`.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let max = row.iter().map(|&v| v * scale).fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
