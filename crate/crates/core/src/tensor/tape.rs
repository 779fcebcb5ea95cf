use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::params::{Grads, ParamStore};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, k: usize, b: usize, geom: ConvGeom },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    TileRows(usize),
    Gather { a: usize, rows: Vec<usize> },
    Sum(usize),
    SumAxis { a: usize, axis: usize },
    L2Norm(usize),
    Cosine(usize, usize),
    NormalizeRows { a: usize, eps: f64 },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    StraightThrough { soft: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

/// Append-only record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    flops: u64,
    inference: bool,
    backward_done: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

impl Tape {
    /// Tape that records gradients for parameters and variables.
    pub fn new() -> Self {
        Tape::default()
    }

    /// Tape whose parameters are plain constants; nothing is tracked.
    pub fn inference() -> Self {
        Tape { inference: true, ..Tape::default() }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    /// Floating point operations executed by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node { value, tracked, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[usize], op: Op) -> Result<Var> {
        check_finite(name, &data)?;
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        Ok(self.push(Tensor::from_parts(shape, data), tracked, op))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Leaf that receives a gradient (unless this is an inference tape).
    pub fn variable(&mut self, t: Tensor) -> Var {
        let tracked = !self.inference;
        self.push(t, tracked, Op::Leaf)
    }

    /// Leaf for a named parameter; repeated lookups of the same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
            .clone();
        let v = self.variable(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m},{k}) @ ({k2},{n})")));
        }
        let out = kernels::matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n, &mut self.flops);
        self.push_op("matmul", vec![m, n], out, &[a.0, b.0], Op::MatMul(a.0, b.0))
    }

    /// Affine map `x @ w + b` with `b` of shape `(out,)` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, d_in) = self.dims2("linear", x)?;
        let (w_in, d_out) = self.dims2("linear", w)?;
        if d_in != w_in || self.shape(b) != [d_out] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let out = kernels::linear(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            rows,
            d_in,
            d_out,
            &mut self.flops,
        );
        self.push_op("linear", vec![rows, d_out], out, &[x.0, w.0, b.0], Op::Linear { x: x.0, w: w.0, b: b.0 })
    }

    /// 2-D convolution of an `(H, W, C_in)` image with a `(K_h, K_w, C_in, C_out)` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (&[h, w, c_in], &[kh, kw, kc, c_out]) = (self.shape(x), self.shape(k)) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", self.shape(x), self.shape(k)),
            ));
        };
        if kc != c_in || self.shape(b) != [c_out] || stride == 0 {
            return Err(Error::shape("conv2d", format!("kernel channels {kc} vs input {c_in}, stride {stride}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d(
            self.nodes[x.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[b.0].value.data(),
            &geom,
            &mut self.flops,
        );
        self.push_op(
            "conv2d",
            vec![geom.h_out, geom.w_out, c_out],
            out,
            &[x.0, k.0, b.0],
            Op::Conv2d { x: x.0, k: k.0, b: b.0, geom },
        )
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        self.flops += out.len() as u64;
        let shape = self.shape(a).to_vec();
        self.push_op(name, shape, out, &[a.0, b.0], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn map_op(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.flops += out.len() as u64;
        let shape = self.shape(a).to_vec();
        self.push_op(name, shape, out, &[a.0], op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map_op("scale", a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_op("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_op("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map_op("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let out = kernels::softmax(self.nodes[a.0].value.data(), outer, len, inner, &mut self.flops);
        self.push_op("softmax", shape, out, &[a.0], Op::Softmax { a: a.0, axis })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that axis' length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("x {shape:?}, gamma {:?}", self.shape(gamma))));
        }
        let (out, xhat, rstd) = kernels::layer_norm(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            d,
            &mut self.flops,
        );
        self.push_op(
            "layer_norm",
            shape,
            out,
            &[x.0, gamma.0, beta.0],
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_op("concat", shape, out, &ids, Op::Concat { parts: ids.clone(), axis })
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push_op("slice", new_shape, out, &[a.0], Op::Slice { a: a.0, axis, start })
    }

    /// Inverse of [`Tape::concat`]: splits `a` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if self.shape(a).get(axis) != Some(&total) {
            return Err(Error::shape("split", format!("sizes {sizes:?} for shape {:?}", self.shape(a))));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        self.push_op("reshape", shape.to_vec(), data, &[a.0], Op::Reshape(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push_op("transpose", vec![c, r], out, &[a.0], Op::Transpose(a.0))
    }

    /// Repeats a `(d,)` vector into a `(rows, d)` matrix.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let &[d] = self.shape(a) else {
            return Err(Error::shape("tile_rows", format!("expected rank 1, got {:?}", self.shape(a))));
        };
        if rows == 0 {
            return Err(Error::shape("tile_rows", "zero rows"));
        }
        let out = self.value(a).data().repeat(rows);
        self.push_op("tile_rows", vec![rows, d], out, &[a.0], Op::TileRows(a.0))
    }

    /// Selects rows of a rank-2 tensor, in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2("gather_rows", a)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("indices {rows:?} for {n} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        self.push_op("gather_rows", vec![rows.len(), d], out, &[a.0], Op::Gather { a: a.0, rows: rows.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.flops += self.value(a).numel() as u64;
        self.push_op("sum", vec![1], vec![s], &[a.0], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis`; the axis is removed (rank-1 inputs give shape `(1,)`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        self.flops += (outer * len * inner) as u64;
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push_op("sum_axis", new_shape, out, &[a.0], Op::SumAxis { a: a.0, axis })
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = super::l2_norm(self.value(a).data());
        self.flops += 2 * self.value(a).numel() as u64 + 1;
        self.push_op("l2_norm", vec![1], vec![n], &[a.0], Op::L2Norm(a.0))
    }

    /// Cosine similarity of two same-shape tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let c = super::cosine_similarity(self.value(a).data(), self.value(b).data()).unwrap_or(f64::NAN);
        self.flops += 6 * self.value(a).numel() as u64 + 3;
        self.push_op("cosine", vec![1], vec![c], &[a.0, b.0], Op::Cosine(a.0, b.0))
    }

    /// Scales each row of a rank-2 tensor to unit length, `x / sqrt(|x|^2 + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2("normalize_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        // squares and sums, eps, sqrt, divides
        self.flops += (n * (3 * d + 2)) as u64;
        self.push_op("normalize_rows", vec![n, d], out, &[a.0], Op::NormalizeRows { a: a.0, eps })
    }

    /// Fused multi-head scaled dot-product attention over `(n, c)` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, c) = self.dims2("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("attention", format!("{c} channels over {heads} heads")));
        }
        let (out, probs) = kernels::attention(
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
            n,
            c,
            heads,
            &mut self.flops,
        );
        self.push_op(
            "attention",
            vec![n, c],
            out,
            &[q.0, k.0, v.0],
            Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs },
        )
    }

    /// Forward value `hard`, gradient passed straight through to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", format!("{:?} vs {:?}", hard.shape(), self.shape(soft))));
        }
        let shape = hard.shape().to_vec();
        self.push_op("straight_through", shape, hard.into_data(), &[soft.0], Op::StraightThrough { soft: soft.0 })
    }

    /// Reverse sweep from a scalar loss. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].tracked {
            return Err(Error::Detached);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let tracked = |j: usize| self.nodes[j].tracked;
        let val = |j: usize| self.nodes[j].value.data();
        let shape = |j: usize| self.nodes[j].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g, m, k, n, tracked(*a), tracked(*b));
                if let Some(da) = da {
                    add_into(&mut grads[*a], &da);
                }
                if let Some(db) = db {
                    add_into(&mut grads[*b], &db);
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, d_in) = (shape(*x)[0], shape(*x)[1]);
                let d_out = shape(*w)[1];
                let (dx, dw) = kernels::matmul_backward(val(*x), val(*w), g, rows, d_in, d_out, tracked(*x), tracked(*w));
                if let Some(dx) = dx {
                    add_into(&mut grads[*x], &dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[*w], &dw);
                }
                if tracked(*b) {
                    add_into(&mut grads[*b], &kernels::col_sums(g, d_out));
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let (dx, dk, db) = kernels::conv2d_backward(val(*x), val(*k), g, geom);
                for (j, d) in [(*x, dx), (*k, dk), (*b, db)] {
                    if tracked(j) {
                        add_into(&mut grads[j], &d);
                    }
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if tracked(j) {
                        add_into(&mut grads[j], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    add_into(&mut grads[*a], g);
                }
                if tracked(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[*b], &neg);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[*a], &d);
                }
                if tracked(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                add_into(&mut grads[*a], &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g.iter().zip(val(*a)).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                add_into(&mut grads[*a], &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                add_into(&mut grads[*a], &d);
            }
            Op::Log(a) => {
                let d: Vec<f64> = g.iter().zip(val(*a)).map(|(x, y)| x / y).collect();
                add_into(&mut grads[*a], &d);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(shape(*a), *axis);
                let d = kernels::softmax_backward(node.value.data(), g, outer, len, inner);
                add_into(&mut grads[*a], &d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dim = shape(*gamma)[0];
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, val(*gamma), dim);
                for (j, d) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if tracked(j) {
                        add_into(&mut grads[j], &d);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shape(p)[*axis];
                    if tracked(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(&mut grads[p], &d);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = axis_split(shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(&mut grads[*a], &d);
            }
            Op::Reshape(a) => add_into(&mut grads[*a], g),
            Op::Transpose(a) => {
                let (r, c) = (shape(*a)[0], shape(*a)[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                add_into(&mut grads[*a], &d);
            }
            Op::TileRows(a) => {
                let d = kernels::col_sums(g, shape(*a)[0]);
                add_into(&mut grads[*a], &d);
            }
            Op::Gather { a, rows } => {
                let d_cols = shape(*a)[1];
                let mut d = vec![0.0; val(*a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d_cols {
                        d[r * d_cols + j] += g[k * d_cols + j];
                    }
                }
                add_into(&mut grads[*a], &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; val(*a).len()];
                add_into(&mut grads[*a], &d);
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = axis_split(shape(*a), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                add_into(&mut grads[*a], &d);
            }
            Op::L2Norm(a) => {
                let n = node.value.item();
                let d: Vec<f64> = val(*a).iter().map(|x| if n > 0.0 { g[0] * x / n } else { 0.0 }).collect();
                add_into(&mut grads[*a], &d);
            }
            Op::Cosine(a, b) => {
                let c = node.value.item();
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (super::l2_norm(av), super::l2_norm(bv));
                if tracked(*a) {
                    let d: Vec<f64> =
                        av.iter().zip(bv).map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na))).collect();
                    add_into(&mut grads[*a], &d);
                }
                if tracked(*b) {
                    let d: Vec<f64> =
                        av.iter().zip(bv).map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb))).collect();
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::NormalizeRows { a, eps } => {
                let d_cols = shape(*a)[1];
                let x = val(*a);
                let mut d = vec![0.0; x.len()];
                for ((xr, gr), dr) in x.chunks(d_cols).zip(g.chunks(d_cols)).zip(d.chunks_mut(d_cols)) {
                    let s = xr.iter().map(|v| v * v).sum::<f64>() + eps;
                    let n = s.sqrt();
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d_cols {
                        dr[j] = gr[j] / n - xr[j] * xg / (n * s);
                    }
                }
                add_into(&mut grads[*a], &d);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, c) = (shape(*q)[0], shape(*q)[1]);
                let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, n, c, *heads);
                for (j, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if tracked(j) {
                        add_into(&mut grads[j], &d);
                    }
                }
            }
            Op::StraightThrough { soft } => add_into(&mut grads[*soft], g),
        }
    }

    /// Gradient of a tracked node after [`Tape::backward`]; zeros when the loss does not reach it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.backward_done || !self.nodes[v.0].tracked {
            return None;
        }
        let shape = self.shape(v).to_vec();
        let data = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
        Some(Tensor::from_parts(shape, data))
    }

    /// Gradients of every parameter touched by this tape.
    pub fn param_grads(&self) -> Grads {
        let mut grads = Grads::default();
        for (name, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                grads.insert(name.clone(), g);
            }
        }
        grads
    }
}
