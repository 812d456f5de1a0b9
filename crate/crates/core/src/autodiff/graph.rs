use rand::Rng;

use super::tensor::{gemm, MatView, MatViewMut, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a tensor and returns its id. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each column.
    Rows,
    /// Normalize each row.
    Cols,
}

/// Geometry of a fused multi-head attention call.
///
/// `q` holds `batch × lq` rows and `k`/`v` hold `batch × lk` rows, each of
/// width `heads × head_dim`, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    /// `batch × lk` validity flags; `None` means every key is valid.
    pub key_mask: Option<Vec<bool>>,
    /// Causal masking: query row `i` sits at absolute position `offset + i`
    /// and may only see keys `j <= offset + i`.
    pub causal_offset: Option<usize>,
}

impl AttentionSpec {
    pub fn full(batch: usize, lq: usize, lk: usize, heads: usize) -> Self {
        AttentionSpec {
            batch,
            lq,
            lk,
            heads,
            key_mask: None,
            causal_offset: None,
        }
    }

    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if let Some(off) = self.causal_offset {
            if j > off + i {
                return false;
            }
        }
        match &self.key_mask {
            Some(m) => m[b * self.lk + j],
            None => true,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Softmax(Var, Axis),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    Huber(Var, Var, T),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of every parameter of a [`ParamStore`], in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn mat_shape<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Smallest `|x|` over every relu input recorded so far, i.e. how far
    /// the current point is from a kink.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .reduce(|a, b| a.min(b))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(&[ta.rows(), tb.cols()]);
        gemm(T::one(), ta.view(), tb.view(), T::zero(), out.view_mut());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.clone();
        let n = ta.cols();
        for row in out.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += *b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut c0 = 0;
        for &p in parts {
            let t = self.value(p);
            let w = t.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + c0..r * cols + c0 + w].copy_from_slice(t.row(r));
            }
            c0 += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let c = t.cols();
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// `out[i] = a[indices[i]]`; an embedding lookup when `a` is a table.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::Shape(format!("gather row {i} of {:?}", t.shape())));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let (r, c) = mat_shape(t);
        let mut out = t.clone();
        let (lines, len, line_stride, elem_stride) = match axis {
            Axis::Cols => (r, c, c, 1),
            Axis::Rows => (c, r, 1, c),
        };
        let d = out.data_mut();
        for l in 0..lines {
            let idx = |k: usize| l * line_stride + k * elem_stride;
            let max = (0..len).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (d[idx(k)] - max).exp();
                d[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                d[idx(k)] = d[idx(k)] / sum;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a, axis), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = mat_shape(t);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(shape_err("layer_norm", t, g));
        }
        let eps = T::lit(1e-5);
        let n = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out.data_mut()[i * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. `rate == 0` returns `a` unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mut rng = seeded_rng(seed);
        let t = self.value(a);
        let mask: Vec<T> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut out = t.clone();
        for (x, m) in out.data_mut().iter_mut().zip(&mask) {
            *x *= *m;
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Fused scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {} heads", spec.heads)));
        }
        if tq.rows() != spec.batch * spec.lq || tk.rows() != spec.batch * spec.lk {
            return Err(shape_err("attention q/k", tq, tk));
        }
        if tk.shape() != tv.shape() || tk.cols() != d {
            return Err(shape_err("attention k/v", tk, tv));
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != spec.batch * spec.lk {
                return Err(Error::Shape(format!(
                    "key mask of length {} for {} keys",
                    m.len(),
                    spec.batch * spec.lk
                )));
            }
        }
        let (out, probs) = attention_forward(tq, tk, tv, &spec);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Attention against keys and values held outside the graph (an
    /// inference cache). Nothing is recorded for backward.
    pub fn attention_fixed_kv(&mut self, q: Var, k: &Tensor<T>, v: &Tensor<T>, spec: &AttentionSpec) -> Result<Var> {
        let tq = self.value(q);
        if tq.rows() != spec.batch * spec.lq || k.rows() != spec.batch * spec.lk || k.shape() != v.shape() {
            return Err(shape_err("attention q/k", tq, k));
        }
        let (out, _) = attention_forward(tq, k, v, spec);
        Ok(self.push(out, Op::Leaf, false))
    }

    /// Mean Huber loss between `pred` and `target`.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err("huber", p, t));
        }
        let d = T::lit(delta);
        let half = T::lit(0.5);
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let e = (a - b).abs();
                if e <= d {
                    half * e * e
                } else {
                    d * (e - half * d)
                }
            })
            .sum();
        let n = T::from_usize(p.len().max(1)).unwrap();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::matrix(1, 1, vec![total / n]), Op::Huber(pred, target, d), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::matrix(1, 1, vec![s]), Op::Sum(a), rg)
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`. Parameters that do not influence
    /// the loss receive zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));
        let mut out: Vec<Tensor<T>> = (0..store.len())
            .map(|i| Tensor::zeros(store.get(i).shape()))
            .collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out);
        }
        Ok(Gradients { tensors: out })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut [Tensor<T>],
    ) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params[*id].add_assign(&g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let ga = acc!(*a);
                    gemm(T::one(), g.view(), tb.view().t(), T::one(), ga.view_mut());
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    gemm(T::one(), ta.view().t(), g.view(), T::one(), gb.view_mut());
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc!(*a).add_assign(&g);
                }
                if wants(*b) {
                    acc!(*b).add_assign(&g);
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    acc!(*a).add_assign(&g);
                }
                if wants(*bias) {
                    let gb = acc!(*bias);
                    let n = g.cols();
                    for row in g.data().chunks(n) {
                        for (x, v) in gb.data_mut().iter_mut().zip(row) {
                            *x += *v;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    for (x, v) in acc!(*a).data_mut().iter_mut().zip(g.data()) {
                        *x += *v * *s;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(p) {
                        for (x, v) in acc!(p).data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *x += *v;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut c0 = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(p) {
                        let gp = acc!(p);
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + c0..r * total + c0 + w];
                            for (x, v) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += *v;
                            }
                        }
                    }
                    c0 += w;
                }
            }
            Op::SliceRows(a, start) => {
                if wants(*a) {
                    let c = g.cols();
                    let ga = acc!(*a);
                    for (x, v) in ga.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                        *x += *v;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let ga = acc!(*a);
                    let (c, w) = (ga.cols(), g.cols());
                    for r in 0..g.rows() {
                        for j in 0..w {
                            ga.data_mut()[r * c + start + j] += g.data()[r * w + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let ga = acc!(*a);
                    let c = g.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga.data_mut()[i * c + j] += g.data()[r * c + j];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = &nodes[a.0].value;
                    for ((gx, v), xv) in acc!(*a).data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xv > T::zero() {
                            *gx += *v;
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if wants(*a) {
                    let y = &node.value;
                    let (r, c) = mat_shape(y);
                    let (lines, len, ls, es) = match axis {
                        Axis::Cols => (r, c, c, 1),
                        Axis::Rows => (c, r, 1, c),
                    };
                    let ga = acc!(*a);
                    for l in 0..lines {
                        let idx = |k: usize| l * ls + k * es;
                        let dot: T = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            ga.data_mut()[idx(k)] += y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = mat_shape(&g);
                let gam = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let gg = acc!(*gamma);
                    for i in 0..r {
                        for j in 0..c {
                            gg.data_mut()[j] += g.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc!(*beta);
                    for i in 0..r {
                        for j in 0..c {
                            gb.data_mut()[j] += g.data()[i * c + j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = acc!(*x);
                    let n = T::from_usize(c).unwrap();
                    let mut dxh = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dxh[j] = g.data()[i * c + j] * gam.data()[j];
                        }
                        let m1 = dxh.iter().copied().sum::<T>() / n;
                        let m2 = (0..c).map(|j| dxh[j] * xhat[i * c + j]).sum::<T>() / n;
                        for j in 0..c {
                            gx.data_mut()[i * c + j] += rstd[i] * (dxh[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if wants(*a) {
                    for ((x, v), m) in acc!(*a).data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *x += *v * *m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut gq = wants(*q).then(|| Tensor::zeros(tq.shape()));
                let mut gk = wants(*k).then(|| Tensor::zeros(tk.shape()));
                let mut gv = wants(*v).then(|| Tensor::zeros(tv.shape()));
                attention_backward(
                    tq,
                    tk,
                    tv,
                    spec,
                    probs,
                    &g,
                    gq.as_mut(),
                    gk.as_mut(),
                    gv.as_mut(),
                );
                if let Some(t) = gq {
                    acc!(*q).add_assign(&t);
                }
                if let Some(t) = gk {
                    acc!(*k).add_assign(&t);
                }
                if let Some(t) = gv {
                    acc!(*v).add_assign(&t);
                }
            }
            Op::Huber(pred, target, delta) => {
                let (p, t) = (&nodes[pred.0].value, &nodes[target.0].value);
                let n = T::from_usize(p.len().max(1)).unwrap();
                let scale = g.data()[0] / n;
                let d: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| {
                        let e = a - b;
                        let h = if e.abs() <= *delta { e } else { *delta * e.signum() };
                        h * scale
                    })
                    .collect();
                if wants(*pred) {
                    for (x, v) in acc!(*pred).data_mut().iter_mut().zip(&d) {
                        *x += *v;
                    }
                }
                if wants(*target) {
                    for (x, v) in acc!(*target).data_mut().iter_mut().zip(&d) {
                        *x -= *v;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let s = g.data()[0];
                    acc!(*a).data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

fn head_block<T>(t: &Tensor<T>, b: usize, l: usize, h: usize, dh: usize) -> MatView<'_, T>
where
    T: Scalar,
{
    t.view().block(b * l, l, h * dh, dh)
}

/// Forward kernel shared by training and cached inference. Returns the
/// output and the `batch × heads × lq × lk` attention probabilities.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / spec.heads;
    let (lq, lk) = (spec.lq, spec.lk);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); spec.batch * spec.heads * lq * lk];
    let mut out = Tensor::zeros(&[spec.batch * lq, d]);
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let base = (b * spec.heads + h) * lq * lk;
            let p = &mut probs[base..base + lq * lk];
            gemm(
                scale,
                head_block(q, b, lq, h, dh),
                head_block(k, b, lk, h, dh).t(),
                T::zero(),
                MatViewMut::dense(p, lq, lk),
            );
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter().enumerate() {
                    if spec.allowed(b, i, j) && *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    if spec.allowed(b, i, j) {
                        *s = (*s - max).exp();
                        sum += *s;
                    } else {
                        *s = T::zero();
                    }
                }
                if sum > T::zero() {
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|s| *s *= inv);
                }
            }
            let dst = MatViewMut::dense(out.data_mut(), spec.batch * lq, d).block(b * lq, lq, h * dh, dh);
            gemm(
                T::one(),
                MatView::dense(p, lq, lk),
                head_block(v, b, lk, h, dh),
                T::zero(),
                dst,
            );
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
    probs: &[T],
    g: &Tensor<T>,
    mut gq: Option<&mut Tensor<T>>,
    mut gk: Option<&mut Tensor<T>>,
    mut gv: Option<&mut Tensor<T>>,
) {
    let d = q.cols();
    let dh = d / spec.heads;
    let (lq, lk) = (spec.lq, spec.lk);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dp = vec![T::zero(); lq * lk];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let base = (b * spec.heads + h) * lq * lk;
            let p = &probs[base..base + lq * lk];
            let pv = MatView::dense(p, lq, lk);
            let go = head_block(g, b, lq, h, dh);
            if let Some(gv) = gv.as_deref_mut() {
                let rows = gv.rows();
                let dst = MatViewMut::dense(gv.data_mut(), rows, d).block(b * lk, lk, h * dh, dh);
                gemm(T::one(), pv.t(), go, T::one(), dst);
            }
            if gq.is_none() && gk.is_none() {
                continue;
            }
            gemm(
                T::one(),
                go,
                head_block(v, b, lk, h, dh).t(),
                T::zero(),
                MatViewMut::dense(&mut dp, lq, lk),
            );
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut dp[i * lk..(i + 1) * lk];
                let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                for (x, pj) in dr.iter_mut().zip(pr) {
                    *x = *pj * (*x - dot) * scale;
                }
            }
            let ds = MatView::dense(&dp, lq, lk);
            if let Some(gq) = gq.as_deref_mut() {
                let rows = gq.rows();
                let dst = MatViewMut::dense(gq.data_mut(), rows, d).block(b * lq, lq, h * dh, dh);
                gemm(T::one(), ds, head_block(k, b, lk, h, dh), T::one(), dst);
            }
            if let Some(gk) = gk.as_deref_mut() {
                let rows = gk.rows();
                let dst = MatViewMut::dense(gk.data_mut(), rows, d).block(b * lk, lk, h * dh, dh);
                gemm(T::one(), ds.t(), head_block(q, b, lq, h, dh), T::one(), dst);
            }
        }
    }
}
