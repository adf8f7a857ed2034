//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node whose parents have strictly smaller indices, so the
//! node list is already in topological order and the backward pass is a single
//! reverse sweep.

use super::{split_axis, strides, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        src: Var,
        indices: Vec<usize>,
    },
    Sum {
        src: Var,
        axis: usize,
    },
    SumAll(Var),
    BroadcastTo(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        src: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        src: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Matmul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Sum { .. } => "sum",
            Op::SumAll(..) => "sum_all",
            Op::BroadcastTo(..) => "broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<&'static str>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, src_offset)` for every element of `out`.
fn for_each_broadcast(out: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += src_strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            off -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

fn expand(t: &Tensor, out: &[usize]) -> Vec<f64> {
    if t.shape() == out {
        return t.data().to_vec();
    }
    let st = broadcast_strides(t.shape(), out);
    let n = out.iter().product();
    let mut v = vec![0.0; n];
    for_each_broadcast(out, &st, |i, o| v[i] = t.data()[o]);
    v
}

/// Sums a gradient of shape `out` back down to `shape`.
fn reduce_to(grad: &[f64], out: &[usize], shape: &[usize]) -> Tensor {
    if out == shape {
        return Tensor {
            shape: shape.to_vec(),
            data: grad.to_vec(),
        };
    }
    let st = broadcast_strides(shape, out);
    let mut r = Tensor::zeros(shape);
    for_each_broadcast(out, &st, |i, o| r.data[o] += grad[i]);
    r
}

/// Batched `c[b] = op(a[b]) @ op(b[b])` with optional transposes; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
fn bmm(a: &[f64], b: &[f64], c: &mut [f64], batch: usize, m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        c.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                if av == 0.0 {
                    continue;
                }
                if trans_b {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * b[j * k + p];
                    }
                } else {
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

fn permute_data(t: &Tensor, axes: &[usize]) -> Tensor {
    let src_st = strides(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let perm_st: Vec<usize> = axes.iter().map(|&a| src_st[a]).collect();
    let mut data = vec![0.0; t.numel()];
    for_each_broadcast(&out_shape, &perm_st, |i, o| data[i] = t.data()[o]);
    Tensor { shape: out_shape, data }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Concat { srcs, .. } => srcs.iter().any(|v| self.rg(*v)),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::Permute(s, _)
            | Op::Reshape(s)
            | Op::Slice { src: s, .. }
            | Op::IndexSelect { src: s, .. }
            | Op::Sum { src: s, .. }
            | Op::SumAll(s)
            | Op::BroadcastTo(s)
            | Op::Scale(s, _)
            | Op::AddScalar(s)
            | Op::Exp(s)
            | Op::Log(s)
            | Op::Sqrt(s)
            | Op::Relu(s)
            | Op::Sigmoid(s)
            | Op::Clamp { src: s, .. }
            | Op::Softmax { src: s, .. } => self.rg(*s),
        };
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(op.name());
        }
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

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Fails with the first op that produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let (xa, xb) = (expand(ta, &out), expand(tb, &out));
            xa.iter().zip(&xb).map(|(x, y)| f(*x, *y)).collect()
        };
        Ok(Tensor { shape: out, data })
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `[m,k] @ [k,n]` or batched `[b,m,k] @ [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let mut data = vec![0.0; batch * m * n];
        bmm(
            self.value(a).data(),
            self.value(b).data(),
            &mut data,
            batch,
            m,
            k,
            n,
            false,
            false,
        );
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(Tensor { shape, data }, Op::Matmul(a, b)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(mismatch("permute", self.shape(a), axes));
        }
        let t = permute_data(self.value(a), axes);
        Ok(self.push(t, Op::Permute(a, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(mismatch("slice", &shape, &[start, end]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { src: a, axis, start }))
    }

    pub fn concat(&mut self, srcs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(srcs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &s in srcs {
            let sh = self.shape(s);
            let ok =
                sh.len() == first.len() && sh.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(mismatch("concat", &first, sh));
            }
            total += sh[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &s in srcs {
                let t = self.value(s);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                srcs: srcs.to_vec(),
                axis,
            },
        ))
    }

    /// Gathers rows (axis 0) in the given order; indices may repeat.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(mismatch("index_select", &shape, indices));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out = shape;
        out[0] = indices.len();
        Ok(self.push(
            Tensor { shape: out, data },
            Op::IndexSelect {
                src: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "sum",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out = shape;
        out.remove(axis);
        Ok(self.push(Tensor { shape: out, data }, Op::Sum { src: a, axis }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or(TensorError::BadAxis {
            op: "mean",
            axis,
            rank: self.shape(a).len(),
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let out = broadcast_shape("broadcast", &src, shape)?;
        if out != shape {
            return Err(mismatch("broadcast", &src, shape));
        }
        let data = expand(self.value(a), shape);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::BroadcastTo(a),
        ))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { src: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    data[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[at(l)] /= z;
                }
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::Softmax { src: a, axis }))
    }

    /// Normalizes over the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::BadAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(mismatch("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: node.op.name() });
            }
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], reduce_to(g.data(), out_shape, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        let mut gb = reduce_to(g.data(), out_shape, self.shape(*b));
                        if neg {
                            gb.data.iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Mul(a, b) => {
                    for (this, other) in [(*a, *b), (*b, *a)] {
                        if self.rg(this) {
                            let o = expand(self.value(other), out_shape);
                            let prod: Vec<f64> = g.data().iter().zip(&o).map(|(x, y)| x * y).collect();
                            accumulate(&mut grads[this.0], reduce_to(&prod, out_shape, self.shape(this)));
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let sa = ta.shape();
                    let (batch, m, k) = if sa.len() == 2 {
                        (1, sa[0], sa[1])
                    } else {
                        (sa[0], sa[1], sa[2])
                    };
                    let n = *tb.shape().last().unwrap();
                    if self.rg(*a) {
                        let mut d = vec![0.0; ta.numel()];
                        bmm(g.data(), tb.data(), &mut d, batch, m, n, k, false, true);
                        accumulate(
                            &mut grads[a.0],
                            Tensor {
                                shape: sa.to_vec(),
                                data: d,
                            },
                        );
                    }
                    if self.rg(*b) {
                        let mut d = vec![0.0; tb.numel()];
                        bmm(ta.data(), g.data(), &mut d, batch, k, m, n, true, false);
                        accumulate(
                            &mut grads[b.0],
                            Tensor {
                                shape: tb.shape().to_vec(),
                                data: d,
                            },
                        );
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    accumulate(&mut grads[a.0], permute_data(&g, &inv));
                }
                Op::Reshape(a) => {
                    let t = g.reshape(self.shape(*a))?;
                    accumulate(&mut grads[a.0], t);
                }
                Op::Slice { src, axis, start } => {
                    let full = self.shape(*src);
                    let (outer, len, inner) = split_axis(full, *axis);
                    let w = out_shape[*axis];
                    let mut d = Tensor::zeros(full);
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        d.data[dst..dst + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                    }
                    accumulate(&mut grads[src.0], d);
                }
                Op::Concat { srcs, axis } => {
                    let (outer, total, inner) = split_axis(out_shape, *axis);
                    let mut offset = 0;
                    for s in srcs {
                        let len = self.shape(*s)[*axis];
                        if self.rg(*s) {
                            let mut d = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                d.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            accumulate(
                                &mut grads[s.0],
                                Tensor {
                                    shape: self.shape(*s).to_vec(),
                                    data: d,
                                },
                            );
                        }
                        offset += len;
                    }
                }
                Op::IndexSelect { src, indices } => {
                    let full = self.shape(*src);
                    let row: usize = full[1..].iter().product();
                    let mut d = Tensor::zeros(full);
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..row {
                            d.data[i * row + j] += g.data()[k * row + j];
                        }
                    }
                    accumulate(&mut grads[src.0], d);
                }
                Op::Sum { src, axis } => {
                    let full = self.shape(*src);
                    let (outer, len, inner) = split_axis(full, *axis);
                    let mut d = Tensor::zeros(full);
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            d.data[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads[src.0], d);
                }
                Op::SumAll(a) => {
                    accumulate(&mut grads[a.0], Tensor::full(self.shape(*a), g.item()));
                }
                Op::BroadcastTo(a) => {
                    accumulate(&mut grads[a.0], reduce_to(g.data(), out_shape, self.shape(*a)));
                }
                Op::Scale(a, c) => {
                    let d = g.data().iter().map(|v| v * c).collect();
                    accumulate(
                        &mut grads[a.0],
                        Tensor {
                            shape: g.shape,
                            data: d,
                        },
                    );
                }
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Exp(a) | Op::Sqrt(a) | Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| match node.op {
                            Op::Exp(_) => gv * yv,
                            Op::Sqrt(_) => gv * 0.5 / yv,
                            _ => gv * yv * (1.0 - yv),
                        })
                        .collect();
                    accumulate(
                        &mut grads[a.0],
                        Tensor {
                            shape: g.shape,
                            data: d,
                        },
                    );
                }
                Op::Log(a) | Op::Relu(a) | Op::Clamp { src: a, .. } => {
                    let x = self.value(*a).data();
                    let d = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| match node.op {
                            Op::Log(_) => gv / xv,
                            Op::Relu(_) => {
                                if *xv > 0.0 {
                                    *gv
                                } else {
                                    0.0
                                }
                            }
                            Op::Clamp { lo, hi, .. } => {
                                if *xv >= lo && *xv <= hi {
                                    *gv
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        })
                        .collect();
                    accumulate(
                        &mut grads[a.0],
                        Tensor {
                            shape: g.shape,
                            data: d,
                        },
                    );
                }
                Op::Softmax { src, axis } => {
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let y = node.value.data();
                    let mut d = Tensor::zeros(out_shape);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g.data()[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                d.data[at(l)] = y[at(l)] * (g.data()[at(l)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[src.0], d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = *out_shape.last().unwrap();
                    let rows = rstd.len();
                    let gd = g.data();
                    if self.rg(*gain) || self.rg(*bias) {
                        let mut dg = vec![0.0; d];
                        let mut db = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += gd[r * d + j] * xhat[r * d + j];
                                db[j] += gd[r * d + j];
                            }
                        }
                        if self.rg(*gain) {
                            accumulate(
                                &mut grads[gain.0],
                                Tensor {
                                    shape: vec![d],
                                    data: dg,
                                },
                            );
                        }
                        if self.rg(*bias) {
                            accumulate(
                                &mut grads[bias.0],
                                Tensor {
                                    shape: vec![d],
                                    data: db,
                                },
                            );
                        }
                    }
                    if self.rg(*x) {
                        let gain_v = self.value(*gain).data();
                        let mut dx = vec![0.0; gd.len()];
                        for r in 0..rows {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gd[r * d + j] * gain_v[j];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[r * d + j];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for j in 0..d {
                                let dh = gd[r * d + j] * gain_v[j];
                                dx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                            }
                        }
                        accumulate(
                            &mut grads[x.0],
                            Tensor {
                                shape: out_shape.to_vec(),
                                data: dx,
                            },
                        );
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn mean_and_sigmoid() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[2.0, 4.0, 6.0]));
        let m = g.mean(a);
        assert_eq!(g.value(m).item(), 4.0);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let cases: [(&[f64], &[f64]); 3] = [
            (&[0.0, 0.0], &[0.5, 0.5]),
            (&[1000.0, 1000.0], &[0.5, 0.5]),
            (&[0.0, 3f64.ln()], &[0.25, 0.75]),
        ];
        for (x, want) in cases {
            let v = g.constant(t(&[2], x));
            let s = g.softmax(v, 0).unwrap();
            for (a, b) in g.value(s).data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        g.check_finite().unwrap();
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, one2, zero2, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let bias = g.constant(t(&[2], &[0.3, -0.7]));
        let y = g.layer_norm(x, zero2, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(t(&[3], &[0.1, 0.2, 0.3]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn nonfinite_is_reported_with_op() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[-1.0]));
        let y = g.log(x);
        let _ = g.sqrt(y);
        assert_eq!(g.check_finite(), Err(TensorError::NonFinite { op: "log" }));
    }

    #[test]
    fn unrelated_graph_content_leaves_gradients_unchanged() {
        let run = |noise: bool| {
            let mut g = Graph::new();
            let x = g.param(t(&[2], &[0.3, -1.2]));
            if noise {
                let z = g.param(t(&[2], &[5.0, 6.0]));
                let _ = g.mul(z, x).unwrap();
            }
            let e = g.exp(x);
            let s = g.sum(e);
            if noise {
                let _ = g.scale(s, 3.0);
            }
            g.backward(s).unwrap().get(x).unwrap().clone()
        };
        assert_eq!(run(false), run(true));
    }
}
