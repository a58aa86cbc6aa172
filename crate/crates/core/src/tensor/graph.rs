use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside the graph module.
///
/// `backward` returns one gradient buffer per input, in input order; `None`
/// means the op contributes nothing to that input.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Dropout(Var, Vec<T>),
    SoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<T>),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        scale: T,
        probs: Vec<T>,
    },
    SegmentMean(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Single-owner computation graph recorded during a forward pass.
///
/// Nodes are appended in creation order, so index order is a topological
/// order and backward simply walks the tape in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat_shape<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a learnable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Saved attention probabilities of a `block_attention` node, laid out
    /// as `rows × block`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::BlockAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let ((p, q), (q2, r)) = (mat_shape(ta), mat_shape(tb));
        if q != q2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::dims("matmul", ta.shape(), tb.shape()));
        }
        let out = kernels::matmul(ta.data(), tb.data(), p, q, r);
        let value = Tensor::matrix(p, r, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let ta = self.value(a);
        let (r, c) = mat_shape(ta);
        let value = Tensor::matrix(c, r, kernels::transpose(ta.data(), r, c))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dims("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dims("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` bias to every row. The only broadcast supported.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tb.numel() != cols {
            return Err(Error::dims("add_row_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dims("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dims("concat_cols", self.value(*first).shape(), t.shape()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let (rows, cols) = mat_shape(tx);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::matrix(idx.len(), cols, data)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn slice_row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.gather_rows(x, &[r])
    }

    /// Inverted dropout. Identity (no new node) in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var> {
        self.check_live()?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout(x, mask), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax_rows".into()));
        }
        let mut data = tx.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, tx.cols());
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        let mut norms = Vec::with_capacity(tx.rows());
        for (r, row) in data.chunks_mut(cols).enumerate() {
            let n = kernels::dot(row, row).sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "cannot normalize row {r} with norm {n}"
                )));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2NormalizeRows(x, norms), &[x]))
    }

    /// Per-row standardization followed by an elementwise affine map.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let cols = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::dims("layer_norm_rows", tx.shape(), tg.shape()));
        }
        let n = T::from_usize(cols).expect("cols");
        let mut xhat = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in xhat.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut data = xhat.clone();
        for row in data.chunks_mut(cols) {
            for ((v, &g), &b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *v = *v * g + b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scaled dot-product attention applied independently to consecutive
    /// blocks of `block` rows: `softmax(Q_b K_bᵀ · scale) V_b` per block.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize, scale: T) -> Result<Var> {
        self.check_live()?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, dk) = mat_shape(tq);
        let dv = tv.cols();
        if tk.rows() != n || tk.cols() != dk || tv.rows() != n {
            return Err(Error::dims("block_attention", tq.shape(), tk.shape()));
        }
        if block == 0 || n % block != 0 {
            return Err(Error::dims("block_attention", tq.shape(), &[block]));
        }
        let mut probs = Vec::with_capacity(n * block);
        let mut out = Vec::with_capacity(n * dv);
        for b in 0..n / block {
            let rs = b * block;
            let qb = &tq.data()[rs * dk..(rs + block) * dk];
            let kb = &tk.data()[rs * dk..(rs + block) * dk];
            let vb = &tv.data()[rs * dv..(rs + block) * dv];
            let mut scores = kernels::matmul_nt(qb, kb, block, dk, block);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            if scores.iter().any(|s| s.is_nan()) {
                return Err(Error::Numeric("NaN attention score".into()));
            }
            kernels::softmax_rows_inplace(&mut scores, block);
            out.extend(kernels::matmul(&scores, vb, block, block, dv));
            probs.extend(scores);
        }
        let value = Tensor::matrix(n, dv, out)?;
        Ok(self.push(
            value,
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    fn check_segments(&self, x: Var, lens: &[usize]) -> Result<()> {
        let t = self.value(x);
        if lens.contains(&0) || lens.iter().sum::<usize>() != t.rows() {
            return Err(Error::dims("segment", t.shape(), lens));
        }
        Ok(())
    }

    /// Mean over consecutive row segments of the given lengths.
    pub fn segment_mean(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        self.check_live()?;
        self.check_segments(x, lens)?;
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = vec![T::zero(); lens.len() * cols];
        let mut r = 0;
        for (s, &len) in lens.iter().enumerate() {
            let out = &mut data[s * cols..(s + 1) * cols];
            for _ in 0..len {
                for (o, &v) in out.iter_mut().zip(tx.row(r)) {
                    *o += v;
                }
                r += 1;
            }
            let l = T::from_usize(len).expect("len");
            for o in out.iter_mut() {
                *o /= l;
            }
        }
        let value = Tensor::matrix(lens.len(), cols, data)?;
        Ok(self.push(value, Op::SegmentMean(x, lens.to_vec()), &[x]))
    }

    /// Column-wise max over consecutive row segments; the first maximal row wins ties.
    pub fn segment_max(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        self.check_live()?;
        self.check_segments(x, lens)?;
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = Vec::with_capacity(lens.len() * cols);
        let mut argmax = Vec::with_capacity(lens.len() * cols);
        let mut start = 0;
        for &len in lens {
            for c in 0..cols {
                let mut best = start;
                for r in start + 1..start + len {
                    if tx.get(r, c) > tx.get(best, c) {
                        best = r;
                    }
                }
                data.push(tx.get(best, c));
                argmax.push(best);
            }
            start += len;
        }
        let value = Tensor::matrix(lens.len(), cols, data)?;
        Ok(self.push(value, Op::SegmentMax(x, argmax), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), &[x]))
    }

    /// Row sums as an `n×1` column.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let data: Vec<T> = (0..tx.rows()).map(|r| tx.row(r).iter().copied().sum()).collect();
        let value = Tensor::matrix(tx.rows(), 1, data)?;
        Ok(self.push(value, Op::SumRows(x), &[x]))
    }

    /// Records a node whose value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.check_live()?;
        Ok(self.push(value, Op::Custom(inputs.to_vec(), op), inputs))
    }

    /// Reverse-mode sweep from a scalar. Consumes the graph: node values are
    /// released afterwards and a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.consumed = true;
        let n_params = self
            .nodes
            .iter()
            .filter_map(|n| n.param.map(|p| p.0 + 1))
            .max()
            .unwrap_or(0);
        let mut param_grads: Vec<Option<Vec<T>>> = vec![None; n_params];
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                accumulate(&mut param_grads[pid.0], g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for node in &mut self.nodes {
            node.value = Tensor::zeros(vec![0]);
            node.op = Op::Leaf;
        }
        Ok(Gradients::new(param_grads))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let send = |v: Var, d: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((p, q), r) = (mat_shape(ta), tb.cols());
                if self.needs(*a) {
                    send(*a, kernels::matmul_nt(g, tb.data(), p, r, q), grads);
                }
                if self.needs(*b) {
                    send(*b, kernels::matmul_tn(ta.data(), g, p, q, r), grads);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = mat_shape(self.value(*a));
                send(*a, kernels::transpose(g, c, r), grads);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.to_vec(), grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    send(*a, g.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect(), grads);
                }
                if self.needs(*b) {
                    send(*b, g.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect(), grads);
                }
            }
            Op::AddRowBias(x, b) => {
                send(*x, g.to_vec(), grads);
                if self.needs(*b) {
                    let cols = out.cols();
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, db, grads);
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect(), grads),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect(),
                grads,
            ),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, g[off..off + n].to_vec(), grads);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = out.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let d: Vec<T> = g
                            .chunks(cols)
                            .flat_map(|row| row[off..off + pc].iter().copied())
                            .collect();
                        send(p, d, grads);
                    }
                    off += pc;
                }
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut d = vec![T::zero(); tx.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (dv, &gv) in d[src * cols..(src + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                    {
                        *dv += gv;
                    }
                }
                send(*x, d, grads);
            }
            Op::Dropout(x, mask) => {
                send(*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect(), grads)
            }
            Op::SoftmaxRows(x) => {
                let cols = out.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.data().chunks(cols)) {
                    let s = kernels::dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(&gv, &y)| y * (gv - s)));
                }
                send(*x, d, grads);
            }
            Op::L2NormalizeRows(x, norms) => {
                let cols = out.cols();
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(cols).zip(out.data().chunks(cols)).zip(norms) {
                    let s = kernels::dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(&gv, &y)| (gv - y * s) / n));
                }
                send(*x, d, grads);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = out.cols();
                let tg = self.value(*gamma);
                let n = T::from_usize(cols).expect("cols");
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, xr), &is) in g.chunks(cols).zip(xhat.chunks(cols)).zip(inv_std) {
                    let dxhat: Vec<T> = gr.iter().zip(tg.data()).map(|(&a, &b)| a * b).collect();
                    let m1 = dxhat.iter().copied().sum::<T>() / n;
                    let m2 = kernels::dot(&dxhat, xr) / n;
                    for c in 0..cols {
                        dgamma[c] += gr[c] * xr[c];
                        dbeta[c] += gr[c];
                        dx.push(is * (dxhat[c] - m1 - xr[c] * m2));
                    }
                }
                send(*x, dx, grads);
                send(*gamma, dgamma, grads);
                send(*beta, dbeta, grads);
            }
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, dk) = mat_shape(tq);
                let dv = tv.cols();
                let bs = *block;
                let mut dq = vec![T::zero(); n * dk];
                let mut dkk = vec![T::zero(); n * dk];
                let mut dvv = vec![T::zero(); n * dv];
                for b in 0..n / bs {
                    let rs = b * bs;
                    let pb = &probs[rs * bs..(rs + bs) * bs];
                    let gb = &g[rs * dv..(rs + bs) * dv];
                    let qb = &tq.data()[rs * dk..(rs + bs) * dk];
                    let kb = &tk.data()[rs * dk..(rs + bs) * dk];
                    let vb = &tv.data()[rs * dv..(rs + bs) * dv];
                    // dV = Pᵀ dO ; dP = dO Vᵀ
                    let dvb = kernels::matmul_tn(pb, gb, bs, bs, dv);
                    dvv[rs * dv..(rs + bs) * dv].copy_from_slice(&dvb);
                    let dp = kernels::matmul_nt(gb, vb, bs, dv, bs);
                    let mut ds = Vec::with_capacity(bs * bs);
                    for (dpr, pr) in dp.chunks(bs).zip(pb.chunks(bs)) {
                        let s = kernels::dot(dpr, pr);
                        ds.extend(dpr.iter().zip(pr).map(|(&d, &p)| p * (d - s) * *scale));
                    }
                    let dqb = kernels::matmul(&ds, kb, bs, bs, dk);
                    let dkb = kernels::matmul_tn(&ds, qb, bs, bs, dk);
                    dq[rs * dk..(rs + bs) * dk].copy_from_slice(&dqb);
                    dkk[rs * dk..(rs + bs) * dk].copy_from_slice(&dkb);
                }
                send(*q, dq, grads);
                send(*k, dkk, grads);
                send(*v, dvv, grads);
            }
            Op::SegmentMean(x, lens) => {
                let cols = out.cols();
                let mut d = Vec::with_capacity(self.value(*x).numel());
                for (s, &len) in lens.iter().enumerate() {
                    let l = T::from_usize(len).expect("len");
                    let gr = &g[s * cols..(s + 1) * cols];
                    for _ in 0..len {
                        d.extend(gr.iter().map(|&v| v / l));
                    }
                }
                send(*x, d, grads);
            }
            Op::SegmentMax(x, argmax) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut d = vec![T::zero(); tx.numel()];
                for (o, (&src, &gv)) in argmax.iter().zip(g).enumerate() {
                    d[src * cols + o % cols] += gv;
                }
                send(*x, d, grads);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; self.value(*x).numel()], grads),
            Op::SumRows(x) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                send(*x, d, grads);
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                for (&v, d) in inputs.iter().zip(op.backward(&ins, out, g)) {
                    if let Some(d) = d {
                        send(v, d, grads);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}
