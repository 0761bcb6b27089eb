//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and appends a node to the tape; `backward`
//! walks the tape in reverse. Nodes whose inputs carry no gradient are
//! treated as constants and skip saving backward buffers.

use crate::conv::{self, Conv2dGeom, TemporalGeom};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{inverse_perm, permute_data, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Large negative logit used for masked attention keys.
const MASKED: f64 = -1e9;

enum Op<F> {
    Leaf,
    Add(Var, Var),
    AddBcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Gelu(Var),
    Linear { x: Var, w: Var },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom, cols: Vec<F> },
    Temporal { x: Var, w: Var, b: Option<Var>, geom: TemporalGeom },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Repeat0(Var),
    MeanLast(Var),
    MaskKeys { x: Var, keep: Vec<bool>, heads: usize },
    Mse { pred: Var, diff: Vec<F>, scale: F },
    WeightedSum { x: Var, weights: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, dim, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let k = F::c((2.0 / std::f64::consts::PI).sqrt());
    let a = F::c(0.044715);
    let half = F::c(0.5);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (F::one() + t);
    let dinner = k * (F::one() + F::c(3.0) * a * x * x);
    let deriv = half * (F::one() + t) + half * x * (F::one() - t * t) * dinner;
    (value, deriv)
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new(grad_enabled: bool) -> Self {
        Self { nodes: Vec::new(), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds `y` to every consecutive block of `y.numel()` elements of `x`
    /// (bias on the last axis, positional tables on trailing axes).
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Var {
        let n = self.value(y).numel();
        let xs = self.value(x);
        assert!(n > 0 && xs.numel() % n == 0, "add_bcast: {:?} does not tile {:?}", self.shape(y), xs.shape());
        let yd = self.data(y);
        let mut data = xs.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &b) in chunk.iter_mut().zip(yd) {
                *d += b;
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), data);
        let rg = self.rg(&[x, y]);
        self.push(value, Op::AddBcast(x, y), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::c(s);
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// `x[.., in] * w[out, in]^T`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear: weight must be 2-d");
        let (out, inp) = (ws[0], ws[1]);
        let xs = self.shape(x);
        assert_eq!(xs.last().copied(), Some(inp), "linear: input dim mismatch ({xs:?} vs weight {ws:?})");
        let rows = self.value(x).numel() / inp;
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("rank >= 1") = out;
        let mut data = vec![F::zero(); rows * out];
        gemm(false, true, rows, out, inp, self.data(x), self.data(w), &mut data, false);
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(shape, data), Op::Linear { x, w }, rg)
    }

    /// Batched matmul of rank-3 tensors with optional transposes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: shapes {sa:?} x {sb:?}");
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm: inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let mut data = vec![F::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(ta, tb, m, n, k, &ad[i * m * k..], &bd[i * k * n..], &mut data[i * m * n..(i + 1) * m * n], false);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![batch, m, n], data), Op::Bmm { a, b, ta, tb }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let d = xs.last_dim();
        let mut data = xs.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.value(x);
        let d = xs.last_dim();
        assert_eq!(self.value(gamma).numel(), d, "layer_norm: gamma size");
        assert_eq!(self.value(beta).numel(), d, "layer_norm: beta size");
        let rows = xs.numel() / d;
        let eps = F::c(eps);
        let dn = F::c(d as f64);
        let mut xhat = vec![F::zero(); xs.numel()];
        let mut rstd = vec![F::zero(); rows];
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![F::zero(); xs.numel()];
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// 2D convolution of `x[n, c, h, w]` with `w[o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1], "conv2d: input {xs:?} weight {ws:?}");
        let geom = Conv2dGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let bias = b.map(|b| self.data(b));
        let (out, cols) = conv::conv2d_forward(self.data(x), self.data(w), bias, &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        let cols = if rg { cols } else { Vec::new() };
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Temporal convolution of `x[seqs * seq_len, c, h, w]` with `w[kt, o, c]`.
    pub fn temporal_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        seq_len: usize,
        valid_len: &[usize],
        causal: bool,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert!(xs.len() >= 2 && ws.len() == 3 && xs[1] == ws[2], "temporal_conv: input {xs:?} weight {ws:?}");
        assert_eq!(xs[0], seq_len * valid_len.len(), "temporal_conv: frame count");
        assert!(valid_len.iter().all(|&l| l <= seq_len), "temporal_conv: valid length exceeds sequence");
        let geom = TemporalGeom {
            seq_len,
            valid_len: valid_len.to_vec(),
            in_ch: xs[1],
            out_ch: ws[1],
            pixels: xs[2..].iter().product(),
            kt: ws[0],
            causal,
        };
        let bias = b.map(|b| self.data(b));
        let out = conv::temporal_forward(self.data(x), self.data(w), bias, &geom);
        let mut shape = xs.clone();
        shape[1] = geom.out_ch;
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        self.push(Tensor::new(shape, out), Op::Temporal { x, w, b, geom }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xs = self.value(x);
        let (data, shape) = permute_data(xs.data(), xs.shape(), perm);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.value(x);
        let (outer, dim, inner) = split_axis(xs.shape(), axis);
        assert!(start + len <= dim, "narrow: {start}+{len} exceeds {dim}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xs.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = xs.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::Narrow { x, axis, start }, rg)
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Var {
        let xs = self.value(x);
        let (outer, dim, inner) = split_axis(xs.shape(), axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                assert!(i < dim, "index_select: index {i} out of range {dim}");
                data.extend_from_slice(&xs.data()[(o * dim + i) * inner..(o * dim + i + 1) * inner]);
            }
        }
        let mut shape = xs.shape().to_vec();
        shape[axis] = indices.len();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::IndexSelect { x, axis, indices: indices.to_vec() }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat: shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let dim = self.shape(p)[axis];
                data.extend_from_slice(&self.data(p)[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat0(&mut self, x: Var, times: usize) -> Var {
        let xs = self.value(x);
        let mut data = Vec::with_capacity(xs.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(xs.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(xs.shape());
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::Repeat0(x), rg)
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let d = xs.last_dim();
        let dn = F::c(d as f64);
        let data = xs.data().chunks(d).map(|r| r.iter().copied().sum::<F>() / dn).collect();
        let shape = xs.shape()[..xs.rank() - 1].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::MeanLast(x), rg)
    }

    /// Masks attention logits `x[batch * heads, q, k]`; `keep[batch * k]`
    /// marks the valid keys of each batch element.
    pub fn mask_keys(&mut self, x: Var, keep: &[bool], heads: usize) -> Var {
        let xs = self.value(x);
        let s = xs.shape();
        assert_eq!(s.len(), 3, "mask_keys: logits must be rank 3");
        let (bh, q, k) = (s[0], s[1], s[2]);
        assert_eq!(keep.len() * heads, bh * k, "mask_keys: mask size");
        let mut data = xs.data().to_vec();
        let masked = F::c(MASKED);
        for i in 0..bh {
            let b = i / heads;
            for r in 0..q {
                let row = &mut data[(i * q + r) * k..(i * q + r + 1) * k];
                for (j, v) in row.iter_mut().enumerate() {
                    if !keep[b * k + j] {
                        *v = masked;
                    }
                }
            }
        }
        let value = Tensor::new(s.to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::MaskKeys { x, keep: keep.to_vec(), heads }, rg)
    }

    /// Mean squared error against a constant target over elements where
    /// `mask` is true (all elements when `mask` is `None`).
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>, mask: Option<&[bool]>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse: shape mismatch");
        if let Some(m) = mask {
            assert_eq!(m.len(), p.numel(), "mse: mask size");
        }
        let mut diff = Vec::with_capacity(p.numel());
        let mut count = 0usize;
        let mut sum = F::zero();
        for (i, (&a, &b)) in p.data().iter().zip(target.data()).enumerate() {
            let keep = mask.map_or(true, |m| m[i]);
            let d = if keep { a - b } else { F::zero() };
            if keep {
                count += 1;
            }
            sum += d * d;
            diff.push(d);
        }
        let count = F::c(count.max(1) as f64);
        let rg = self.rg(&[pred]);
        let scale = F::c(2.0) / count;
        self.push(Tensor::scalar(sum / count), Op::Mse { pred, diff, scale }, rg)
    }

    /// `sum(x * weights)` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[F]) -> Var {
        let xs = self.value(x);
        assert_eq!(xs.numel(), weights.len(), "weighted_sum: size mismatch");
        let s = xs.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![F::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, g, &mut grads);
        }
        Grads { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, data: Vec<F>) {
        if !self.needs(v) {
            return;
        }
        let shape = self.shape(v).to_vec();
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, data)),
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::AddBcast(x, y) => {
                self.acc(grads, *x, gd.to_vec());
                if self.needs(*y) {
                    let n = self.value(*y).numel();
                    let mut dy = vec![F::zero(); n];
                    for chunk in gd.chunks(n) {
                        for (d, &v) in dy.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *y, dy);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.data(*b)).map(|(&g, &v)| g * v).collect();
                    self.acc(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.data(*a)).map(|(&g, &v)| g * v).collect();
                    self.acc(grads, *b, d);
                }
            }
            Op::Scale(x, s) => {
                let d = gd.iter().map(|&v| v * *s).collect();
                self.acc(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = gd.iter().zip(self.data(*x)).map(|(&g, &v)| g * gelu_parts(v).1).collect();
                self.acc(grads, *x, d);
            }
            Op::Linear { x, w } => {
                let ws = self.shape(*w);
                let (out, inp) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / inp;
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); rows * inp];
                    gemm(false, false, rows, inp, out, gd, self.data(*w), &mut dx, false);
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); out * inp];
                    gemm(true, false, out, inp, rows, gd, self.data(*x), &mut dw, false);
                    self.acc(grads, *w, dw);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let batch = sa[0];
                let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if tb { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut da = vec![F::zero(); batch * m * k];
                    for i in 0..batch {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * k * n..(i + 1) * k * n];
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(tb, true, k, m, n, bb, dc, out, false);
                        } else {
                            gemm(false, !tb, m, k, n, dc, bb, out, false);
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); batch * k * n];
                    for i in 0..batch {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let aa = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(true, ta, n, k, m, dc, aa, out, false);
                        } else {
                            gemm(!ta, false, k, n, m, aa, dc, out, false);
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let dn = F::c(d as f64);
                let gam = self.data(*gamma);
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dx = vec![F::zero(); xhat.len()];
                let mut dxhat = vec![F::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = F::zero();
                    let mut sum_dh_h = F::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                        sum_dh += dxhat[j];
                        sum_dh_h += dxhat[j] * hr[j];
                    }
                    for j in 0..d {
                        dx[r * d + j] = rs / dn * (dn * dxhat[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (dx, dw, db) = conv::conv2d_backward(gd, self.data(*w), cols, geom, self.needs(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::Temporal { x, w, b, geom } => {
                let (dx, dw, db) = conv::temporal_backward(gd, self.data(*x), self.data(*w), geom, self.needs(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, gd.to_vec()),
            Op::Permute { x, perm } => {
                let (d, _) = permute_data(gd, node.value.shape(), &inverse_perm(perm));
                self.acc(grads, *x, d);
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![F::zero(); outer * dim * inner];
                for o in 0..outer {
                    dx[(o * dim + start) * inner..(o * dim + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, dx);
            }
            Op::IndexSelect { x, axis, indices } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let mut dx = vec![F::zero(); outer * dim * inner];
                let n = indices.len();
                for o in 0..outer {
                    for (pos, &i) in indices.iter().enumerate() {
                        let src = &gd[(o * n + pos) * inner..(o * n + pos + 1) * inner];
                        for (d, &s) in dx[(o * dim + i) * inner..(o * dim + i + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let dim = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            dp.extend_from_slice(&gd[(o * total + offset) * inner..(o * total + offset + dim) * inner]);
                        }
                        self.acc(grads, p, dp);
                    }
                    offset += dim;
                }
            }
            Op::Repeat0(x) => {
                let n = self.value(*x).numel();
                let mut dx = vec![F::zero(); n];
                for chunk in gd.chunks(n) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::MeanLast(x) => {
                let d = self.value(*x).last_dim();
                let dn = F::c(d as f64);
                let mut dx = Vec::with_capacity(gd.len() * d);
                for &v in gd {
                    dx.extend(std::iter::repeat(v / dn).take(d));
                }
                self.acc(grads, *x, dx);
            }
            Op::MaskKeys { x, keep, heads } => {
                let s = node.value.shape();
                let (q, k) = (s[1], s[2]);
                let mut dx = gd.to_vec();
                for (i, chunk) in dx.chunks_mut(q * k).enumerate() {
                    let b = i / heads;
                    for row in chunk.chunks_mut(k) {
                        for (j, v) in row.iter_mut().enumerate() {
                            if !keep[b * k + j] {
                                *v = F::zero();
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Mse { pred, diff, scale } => {
                let g0 = gd[0] * *scale;
                let d = diff.iter().map(|&v| v * g0).collect();
                self.acc(grads, *pred, d);
            }
            Op::WeightedSum { x, weights } => {
                let g0 = gd[0];
                let d = weights.iter().map(|&w| w * g0).collect();
                self.acc(grads, *x, d);
            }
        }
    }
}
