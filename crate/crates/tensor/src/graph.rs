//! Tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar output with respect to every node that needs one.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{add_assign, axpy, dot, linear_forward, sigmoid, softmax_in_place};
use crate::param::{GradStore, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Silu(Var),
    Tanh(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Places a parameter on the tape once; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param(id), store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(t, Op::Scale(a, c), g))
    }

    /// `y = x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (out, inp) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err("linear bias", self.shape(b), &[out]));
            }
        }
        let rows = self.value(x).numel() / inp.max(1);
        let y = linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            inp,
            out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let t = Tensor::new(shape, y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        Ok(self.push(t, Op::Linear { x, w, b }, g))
    }

    /// Rows of `table` (`[vocab, d]`) selected by `indices`, shape `[n, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding", &ts, &[0, 0]));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(TensorError::Contract(format!("embedding index {i} out of range for {vocab} rows")));
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        let g = self.any_grad(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            g,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let rows = xv.rows();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * gv[i] + bv[i];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax(x), g))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Silu(x), g))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Tanh(x), g))
    }

    /// 2-D convolution of a `[c, h, w]` input with `[o, c, k, k]` filters.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d bias", self.shape(b), &[o]));
            }
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let npix = oh * ow;
        let q = c * k * k;
        let wv = self.value(w).data();
        let mut out = vec![0.0; o * npix];
        for oc in 0..o {
            let orow = &mut out[oc * npix..(oc + 1) * npix];
            if let Some(b) = b {
                orow.fill(self.value(b).data()[oc]);
            }
            for qi in 0..q {
                let wq = wv[oc * q + qi];
                if wq != 0.0 {
                    axpy(wq, &cols[qi * npix..(qi + 1) * npix], orow);
                }
            }
        }
        let t = Tensor::new(vec![o, oh, ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, cols, geom }, g))
    }

    /// Max pooling of a `[c, h, w]` input with a square window.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || k == 0 || stride == 0 || xs[1] < k || xs[2] < k {
            return Err(shape_err("max_pool2d", &xs, &[k, k]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        let base = ch * h * w + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            let v = xv[base + kx];
                            if v > best {
                                best = v;
                                best_i = base + kx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, g))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1) as f64;
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let g = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, g))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || target >= lv.numel() {
            return Err(TensorError::Contract(format!(
                "cross_entropy needs one row of logits with target < {}, got shape {:?} and target {target}",
                lv.cols(),
                lv.shape()
            )));
        }
        let mut probs = lv.data().to_vec();
        softmax_in_place(&mut probs);
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[target];
        let g = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, g))
    }

    /// Multi-head causal attention over packed `[n, 3d]` query/key/value rows.
    ///
    /// Position `i` attends to positions `0..=i` only; the result is `[n, d]`
    /// with heads concatenated along the last axis.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || !s[1].is_multiple_of(3) {
            return Err(shape_err("causal_attention", &s, &[0, 0]));
        }
        let (n, d) = (s[0], s[1] / 3);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for i in 0..n {
                let qi = &x[i * 3 * d + qo..i * 3 * d + qo + dh];
                for j in 0..=i {
                    scores[j] = dot(qi, &x[j * 3 * d + ko..j * 3 * d + ko + dh]) * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                prow[..=i].copy_from_slice(&scores[..=i]);
                let orow = &mut out[i * d + qo..i * d + qo + dh];
                for j in 0..=i {
                    axpy(scores[j], &x[j * 3 * d + vo..j * 3 * d + vo + dh], orow);
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let g = self.any_grad(&[qkv]);
        Ok(self.push(t, Op::Attention { qkv, heads, probs }, g))
    }

    /// Attention weights of the node produced by [`Graph::causal_attention`],
    /// laid out as `[heads, n, n]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Stacks inputs along the first axis; every input is viewed as rows of the
    /// same width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of nothing".into()));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d {
                return Err(shape_err("concat_rows", self.shape(parts[0]), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Concatenates inputs along the last axis; all inputs need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), v.shape()));
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, width], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(shape_err("slice_rows", xv.shape(), &[start, len]));
        }
        let d = xv.cols();
        let data = xv.data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::new(vec![len, d], data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), g))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), g))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, found shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_assign(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    axpy(*c, g, ga);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out, inp) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let rows = xv.len() / inp.max(1);
                if let Some(gx) = acc!(*x) {
                    for r in 0..rows {
                        let gxr = &mut gx[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, &wv[o * inp..(o + 1) * inp], gxr);
                            }
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for r in 0..rows {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut gw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = acc!(*b) {
                        for r in 0..rows {
                            add_assign(gb, &g[r * out..(r + 1) * out]);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.value(*table).cols();
                if let Some(gt) = acc!(*table) {
                    for (r, &i) in indices.iter().enumerate() {
                        add_assign(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
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
                let d = self.value(*x).cols();
                let gv = self.value(*gamma).data();
                if let Some(gg) = acc!(*gamma) {
                    for (r, _) in rstd.iter().enumerate() {
                        for i in 0..d {
                            gg[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for r in 0..rstd.len() {
                        add_assign(gb, &g[r * d..(r + 1) * d]);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for i in 0..d {
                            dxhat[i] = g[r * d + i] * gv[i];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, xh) / d as f64;
                        for i in 0..d {
                            gx[r * d + i] += rs * (dxhat[i] - m1 - xh[i] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for (r, yr) in y.chunks(d).enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let s = dot(gr, yr);
                        for i in 0..d {
                            gx[r * d + i] += yr[i] * (gr[i] - s);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = acc!(*x) {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *o += gi * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Conv2d { x, w, b, cols, geom } => {
                let npix = geom.oh * geom.ow;
                let q = geom.c * geom.k * geom.k;
                let wv = self.value(*w).data();
                if let Some(gw) = acc!(*w) {
                    for oc in 0..geom.o {
                        let grow = &g[oc * npix..(oc + 1) * npix];
                        for qi in 0..q {
                            gw[oc * q + qi] += dot(grow, &cols[qi * npix..(qi + 1) * npix]);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = acc!(*b) {
                        for oc in 0..geom.o {
                            gb[oc] += g[oc * npix..(oc + 1) * npix].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dcols = vec![0.0; q * npix];
                    for oc in 0..geom.o {
                        let grow = &g[oc * npix..(oc + 1) * npix];
                        for qi in 0..q {
                            let wq = wv[oc * q + qi];
                            if wq != 0.0 {
                                axpy(wq, grow, &mut dcols[qi * npix..(qi + 1) * npix]);
                            }
                        }
                    }
                    col2im_add(&dcols, geom, gx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = acc!(*x) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * g[0] / p.len().max(1) as f64;
                if let Some(gp) = acc!(*pred) {
                    for ((o, a), b) in gp.iter_mut().zip(p).zip(t) {
                        *o += scale * (a - b);
                    }
                }
                if let Some(gt) = acc!(*target) {
                    for ((o, a), b) in gt.iter_mut().zip(p).zip(t) {
                        *o -= scale * (a - b);
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                if let Some(gl) = acc!(*logits) {
                    for (i, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let s = self.shape(*qkv);
                let (n, d) = (s[0], s[1] / 3);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = self.value(*qkv).data();
                if let Some(gx) = acc!(*qkv) {
                    let mut dp = vec![0.0; n];
                    for h in 0..*heads {
                        let qo = h * dh;
                        let ko = d + h * dh;
                        let vo = 2 * d + h * dh;
                        for i in 0..n {
                            let gi = &g[i * d + qo..i * d + qo + dh];
                            let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                            let mut s_acc = 0.0;
                            for j in 0..=i {
                                dp[j] = dot(gi, &x[j * 3 * d + vo..j * 3 * d + vo + dh]);
                                s_acc += prow[j] * dp[j];
                            }
                            for j in 0..=i {
                                let pij = prow[j];
                                axpy(pij, gi, &mut gx[j * 3 * d + vo..j * 3 * d + vo + dh]);
                                let ds = pij * (dp[j] - s_acc) * scale;
                                if ds != 0.0 {
                                    let (kj_start, qi_start) = (j * 3 * d + ko, i * 3 * d + qo);
                                    for e in 0..dh {
                                        gx[qi_start + e] += ds * x[kj_start + e];
                                        gx[kj_start + e] += ds * x[qi_start + e];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = acc!(p) {
                        add_assign(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let rows = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = acc!(p) {
                        for r in 0..rows {
                            add_assign(&mut gp[r * c..(r + 1) * c], &g[r * width + col..r * width + col + c]);
                        }
                    }
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    add_assign(&mut gx[start * d..start * d + g.len()], g);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    add_assign(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
        }
    }

    /// The parameter a node was created from, if any.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Parameters placed on this tape, with their nodes.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(k, v)| (*k, *v))
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.k * g.k * npix];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.ow + ox] = x[ch * g.h * g.w + iy as usize * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let npix = g.oh * g.ow;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &dcols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[ch * g.h * g.w + iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient on `graph` into `store`.
    pub fn accumulate_params(&self, graph: &Graph, store: &mut GradStore) {
        for (id, var) in graph.param_vars() {
            if let Some(g) = self.wrt(var) {
                add_assign(store.get_mut(id), g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn silu_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]));
        let y = g.silu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.7, 0.7, 0.7]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, -1.0, 4.0, 1.5, -9.0, 2.6]));
        let gamma = g.constant(Tensor::full(&[6], 1.0));
        let beta = g.constant(Tensor::zeros(&[6]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 6.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        // the eps term shrinks the variance slightly below one
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), true).unwrap();
        store.set_trainable_where(|_| false);
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.5, 0.25]).with_requires_grad(true));
        let wv = g.param(&store, w);
        let y = g.linear(x, wv, None).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(wv).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap().with_requires_grad(true));
        let y = g.max_pool2d(x, 2, 2).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
