//! Recording graph for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the
//! information its backward rule needs. Nodes only reference earlier nodes,
//! so reverse insertion order is a valid topological order.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Added to variances and squared norms before taking square roots.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len_in: usize,
    len_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    Cosine {
        a: Var,
        b: Var,
        raw: Vec<T>,
        na: Vec<T>,
        nb: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when no gradient reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Distance of the recorded forward pass from the non-smooth or
    /// ill-conditioned points of its ops: the smallest `|input|` of any ReLU
    /// and the smallest standard deviation seen by any normalization.
    /// Both are infinite when no such op was recorded.
    pub fn smoothness_margins(&self) -> (f64, f64) {
        let mut relu = f64::INFINITY;
        let mut std = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        relu = relu.min(v.as_f64().abs());
                    }
                }
                Op::ChannelNorm { inv_std, .. } | Op::BatchNorm { inv_std, .. } => {
                    for is in inv_std {
                        std = std.min(1.0 / is.as_f64());
                    }
                }
                _ => {}
            }
        }
        (relu, std)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(mismatch("matmul expects 2-D operands", ta.shape(), tb.shape()));
        };
        if k != k2 {
            return Err(mismatch("matmul inner dimension", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta.data()[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&tb.data()[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Affine map `x w^T + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, d_in], &[d_out, d_in2]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("linear expects 2-D input and weight", tx.shape(), tw.shape()));
        };
        if d_in != d_in2 || tb.shape() != [d_out] {
            return Err(mismatch("linear", tx.shape(), tw.shape()));
        }
        let mut out = Vec::with_capacity(batch * d_out);
        for r in 0..batch {
            let xr = tx.row(r);
            for o in 0..d_out {
                let wr = &tw.data()[o * d_in..(o + 1) * d_in];
                let dot: T = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                out.push(dot + tb.data()[o]);
            }
        }
        let out = Tensor::new(vec![batch, d_out], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation with zero padding.
    /// `x: [batch, c_in, len]`, `w: [c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[batch, c_in, len_in], &[c_out, c_in2, k]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("conv1d expects 3-D input and kernel", tx.shape(), tw.shape()));
        };
        if c_in != c_in2 {
            return Err(mismatch("conv1d channels", tx.shape(), tw.shape()));
        }
        if stride == 0 || k > len_in + 2 * pad {
            return Err(Error::ShapeMismatch(format!(
                "conv1d kernel {k} / stride {stride} does not fit length {len_in} with padding {pad}"
            )));
        }
        let len_out = (len_in + 2 * pad - k) / stride + 1;
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            len_in,
            len_out,
            k,
            stride,
            pad,
        };
        let mut out = vec![T::zero(); batch * c_out * len_out];
        let (xd, wd) = (tx.data(), tw.data());
        out.par_chunks_mut(c_out * len_out)
            .zip(xd.par_chunks(c_in * len_in))
            .for_each(|(o, xb)| conv_forward(xb, wd, o, &dims));
        let out = Tensor::new(vec![batch, c_out, len_out], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv1d { x, w, dims }, rg))
    }

    /// Per-example normalization over all non-batch dimensions, followed by a
    /// per-channel affine map. `x: [batch, c]` or `[batch, c, len]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (batch, c, len) = match *tx.shape() {
            [b, c] => (b, c, 1),
            [b, c, l] => (b, c, l),
            _ => return Err(mismatch("channel_norm expects 2-D or 3-D input", tx.shape(), &[])),
        };
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(mismatch("channel_norm affine", tg.shape(), &[c]));
        }
        let n = c * len;
        let eps = T::lit(NORM_EPS);
        let mut xhat = vec![T::zero(); batch * n];
        let mut inv_std = vec![T::zero(); batch];
        let mut out = vec![T::zero(); batch * n];
        for b in 0..batch {
            let xs = &tx.data()[b * n..(b + 1) * n];
            let mean = xs.iter().copied().sum::<T>() / T::lit(n as f64);
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::lit(n as f64);
            let is = T::one() / (var + eps).sqrt();
            inv_std[b] = is;
            for ch in 0..c {
                let (g, be) = (tg.data()[ch], tb.data()[ch]);
                for l in 0..len {
                    let i = b * n + ch * len + l;
                    let h = (xs[ch * len + l] - mean) * is;
                    xhat[i] = h;
                    out[i] = g * h + be;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }
    /// Per-feature normalization over the batch, followed by a per-feature
    /// affine map. `x: [batch, c]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let [batch, c] = *tx.shape() else {
            return Err(mismatch("batch_norm expects 2-D input", tx.shape(), &[]));
        };
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(mismatch("batch_norm affine", tg.shape(), &[c]));
        }
        let eps = T::lit(NORM_EPS);
        let nb = T::lit(batch as f64);
        let mut xhat = vec![T::zero(); batch * c];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); batch * c];
        for ch in 0..c {
            let col = |b: usize| tx.data()[b * c + ch];
            let mean = (0..batch).map(col).sum::<T>() / nb;
            let var = (0..batch).map(|b| (col(b) - mean) * (col(b) - mean)).sum::<T>() / nb;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..batch {
                let h = (col(b) - mean) * is;
                xhat[b * c + ch] = h;
                out[b * c + ch] = tg.data()[ch] * h + tb.data()[ch];
            }
        }
        let out = Tensor::new(vec![batch, c], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `[batch, c, len] -> [batch, c]` mean over length.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[batch, c, len] = tx.shape() else {
            return Err(mismatch("global_avg_pool expects 3-D input", tx.shape(), &[]));
        };
        let inv = T::lit(1.0 / len as f64);
        let data = tx
            .data()
            .chunks_exact(len)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![batch, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Row-wise cosine similarity of two `[batch, d]` tensors (or two `[d]`
    /// vectors), giving `[batch]`. Values are clamped to `[-1, 1]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.shape().len() > 2 {
            return Err(mismatch("cosine_similarity", ta.shape(), tb.shape()));
        }
        let rows = if ta.shape().len() == 2 { ta.shape()[0] } else { 1 };
        let d = ta.numel() / rows;
        let eps = T::lit(NORM_EPS);
        let (mut raw, mut na, mut nb) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..rows {
            let (ar, br) = (&ta.data()[r * d..(r + 1) * d], &tb.data()[r * d..(r + 1) * d]);
            let aa: T = ar.iter().map(|&v| v * v).sum();
            let bb: T = br.iter().map(|&v| v * v).sum();
            if aa == T::zero() || bb == T::zero() {
                return Err(Error::DegenerateVector);
            }
            let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            let (sa, sb) = ((aa + eps).sqrt(), (bb + eps).sqrt());
            raw.push(dot / (sa * sb));
            na.push(sa);
            nb.push(sb);
        }
        let out = Tensor::new(
            vec![rows],
            raw.iter().map(|&c| c.max(-T::one()).min(T::one())).collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Cosine { a, b, raw, na, nb }, rg))
    }

    /// Mean squared error against a fixed target with the same element count.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.numel() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "mse: prediction has {} elements, target {}",
                tp.numel(),
                target.len()
            )));
        }
        let n = T::lit(target.len() as f64);
        let loss = tp
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let &[batch, k] = tl.shape() else {
            return Err(mismatch("softmax_cross_entropy expects 2-D logits", tl.shape(), &[]));
        };
        if labels.len() != batch || labels.iter().any(|&l| l >= k) {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy: {} labels for batch {batch} with {k} classes",
                labels.len()
            )));
        }
        let mut probs = vec![T::zero(); batch * k];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = tl.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            total += lse - row[label];
        }
        let loss = total / T::lit(batch as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Takes `&self`, so repeated calls return identical gradients and never
    /// accumulate into each other.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g.data()[0] / T::lit(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, g, grads),
            Op::Conv1d { x, w, dims } => self.backprop_conv(*x, *w, dims, g, grads),
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => self.backprop_norm(*x, *gamma, *beta, xhat, inv_std, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let c = inv_std.len();
                let batch = xhat.len() / c;
                let nb = T::lit(batch as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for b in 0..batch {
                        let i = b * c + ch;
                        let gv = g.data()[i];
                        dg[ch] += gv * xhat[i];
                        db[ch] += gv;
                        let d = gv * tg.data()[ch];
                        s1 += d;
                        s2 += d * xhat[i];
                    }
                    for b in 0..batch {
                        let i = b * c + ch;
                        let d = g.data()[i] * tg.data()[ch];
                        dx[i] = inv_std[ch] * (d - s1 / nb - xhat[i] * s2 / nb);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![batch, c], dx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dg).unwrap());
                self.accumulate(grads, *beta, Tensor::new(vec![c], db).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x).to_vec();
                let len = shape[2];
                let inv = T::lit(1.0 / len as f64);
                let mut d = Vec::with_capacity(g.numel() * len);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, len));
                }
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::Cosine { a, b, raw, na, nb } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let rows = raw.len();
                let d = ta.numel() / rows;
                let mut da = vec![T::zero(); ta.numel()];
                let mut db = vec![T::zero(); tb.numel()];
                for r in 0..rows {
                    let (gv, c, sa, sb) = (g.data()[r], raw[r], na[r], nb[r]);
                    let inv_ab = T::one() / (sa * sb);
                    for i in r * d..(r + 1) * d {
                        let (av, bv) = (ta.data()[i], tb.data()[i]);
                        da[i] = gv * (bv * inv_ab - c * av / (sa * sa));
                        db[i] = gv * (av * inv_ab - c * bv / (sb * sb));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::Mse { pred, target } => {
                let tp = self.value(*pred);
                let scale = g.data()[0] * T::lit(2.0 / target.len() as f64);
                let d = tp.data().iter().zip(target).map(|(&p, &t)| scale * (p - t)).collect();
                self.accumulate(grads, *pred, Tensor::new(tp.shape().to_vec(), d).unwrap());
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let shape = self.shape(*logits).to_vec();
                let k = shape[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(shape, d).unwrap());
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if self.rg(a) {
            // dA = G B^T
            let mut d = vec![T::zero(); m * k];
            for i in 0..m {
                for p in 0..k {
                    d[i * k + p] = (0..n).map(|j| g.data()[i * n + j] * tb.data()[p * n + j]).sum();
                }
            }
            self.accumulate(grads, a, Tensor::new(vec![m, k], d).unwrap());
        }
        if self.rg(b) {
            // dB = A^T G
            let mut d = vec![T::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ta.data()[i * k + p];
                    for j in 0..n {
                        d[p * n + j] += av * g.data()[i * n + j];
                    }
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![k, n], d).unwrap());
        }
    }

    fn backprop_linear(&self, x: Var, w: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (batch, d_in) = (tx.shape()[0], tx.shape()[1]);
        let d_out = tw.shape()[0];
        if self.rg(x) {
            let mut d = vec![T::zero(); batch * d_in];
            for r in 0..batch {
                for o in 0..d_out {
                    let gv = g.data()[r * d_out + o];
                    let wr = &tw.data()[o * d_in..(o + 1) * d_in];
                    for (dv, &wv) in d[r * d_in..(r + 1) * d_in].iter_mut().zip(wr) {
                        *dv += gv * wv;
                    }
                }
            }
            self.accumulate(grads, x, Tensor::new(vec![batch, d_in], d).unwrap());
        }
        if self.rg(w) {
            let mut d = vec![T::zero(); d_out * d_in];
            for r in 0..batch {
                let xr = tx.row(r);
                for o in 0..d_out {
                    let gv = g.data()[r * d_out + o];
                    for (dv, &xv) in d[o * d_in..(o + 1) * d_in].iter_mut().zip(xr) {
                        *dv += gv * xv;
                    }
                }
            }
            self.accumulate(grads, w, Tensor::new(vec![d_out, d_in], d).unwrap());
        }
        if self.rg(b) {
            let mut d = vec![T::zero(); d_out];
            for r in 0..batch {
                for (dv, &gv) in d.iter_mut().zip(g.row(r)) {
                    *dv += gv;
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![d_out], d).unwrap());
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, dims: &ConvDims, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let in_sz = dims.c_in * dims.len_in;
        let out_sz = dims.c_out * dims.len_out;
        let w_sz = tw.numel();
        // Per-example partials, reduced afterwards in batch order so the
        // result does not depend on the thread count.
        let partials: Vec<(Vec<T>, Vec<T>)> = (0..dims.batch)
            .into_par_iter()
            .map(|b| {
                let xb = &tx.data()[b * in_sz..(b + 1) * in_sz];
                let gb = &g.data()[b * out_sz..(b + 1) * out_sz];
                let mut dx = if need_x { vec![T::zero(); in_sz] } else { Vec::new() };
                let mut dw = if need_w { vec![T::zero(); w_sz] } else { Vec::new() };
                conv_backward(xb, tw.data(), gb, &mut dx, &mut dw, dims);
                (dx, dw)
            })
            .collect();
        if need_w {
            let mut dw = vec![T::zero(); w_sz];
            for (_, p) in &partials {
                for (a, &b) in dw.iter_mut().zip(p) {
                    *a += b;
                }
            }
            self.accumulate(grads, w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
        }
        if need_x {
            let dx: Vec<T> = partials.into_iter().flat_map(|(dx, _)| dx).collect();
            self.accumulate(grads, x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let tx = self.value(x);
        let tg = self.value(gamma);
        let batch = tx.shape()[0];
        let c = tx.shape()[1];
        let len = tx.numel() / (batch * c);
        let n = c * len;
        let nf = T::lit(n as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); tx.numel()];
        for b in 0..batch {
            let base = b * n;
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ch in 0..c {
                let gm = tg.data()[ch];
                for l in 0..len {
                    let i = base + ch * len + l;
                    let gv = g.data()[i];
                    dgamma[ch] += gv * xhat[i];
                    dbeta[ch] += gv;
                    let dh = gv * gm;
                    s1 += dh;
                    s2 += dh * xhat[i];
                }
            }
            let k = inv_std[b] / nf;
            for ch in 0..c {
                let gm = tg.data()[ch];
                for l in 0..len {
                    let i = base + ch * len + l;
                    let dh = g.data()[i] * gm;
                    dx[i] = k * (nf * dh - s1 - xhat[i] * s2);
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
        self.accumulate(grads, gamma, Tensor::new(vec![c], dgamma).unwrap());
        self.accumulate(grads, beta, Tensor::new(vec![c], dbeta).unwrap());
    }
}

/// Output positions `t` for which input index `t*stride + j - pad` is in range.
fn valid_range(j: usize, d: &ConvDims) -> (usize, usize) {
    let lo = if d.pad > j { (d.pad - j).div_ceil(d.stride) } else { 0 };
    let hi = if d.len_in + d.pad > j {
        ((d.len_in + d.pad - j - 1) / d.stride + 1).min(d.len_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], out: &mut [T], d: &ConvDims) {
    for o in 0..d.c_out {
        let orow = &mut out[o * d.len_out..(o + 1) * d.len_out];
        for c in 0..d.c_in {
            let xrow = &x[c * d.len_in..(c + 1) * d.len_in];
            for j in 0..d.k {
                let wv = w[(o * d.c_in + c) * d.k + j];
                let (lo, hi) = valid_range(j, d);
                for t in lo..hi {
                    orow[t] += wv * xrow[t * d.stride + j - d.pad];
                }
            }
        }
    }
}

fn conv_backward<T: Scalar>(x: &[T], w: &[T], g: &[T], dx: &mut [T], dw: &mut [T], d: &ConvDims) {
    let need_x = !dx.is_empty();
    let need_w = !dw.is_empty();
    for o in 0..d.c_out {
        let grow = &g[o * d.len_out..(o + 1) * d.len_out];
        for c in 0..d.c_in {
            let xrow = &x[c * d.len_in..(c + 1) * d.len_in];
            for j in 0..d.k {
                let wi = (o * d.c_in + c) * d.k + j;
                let (lo, hi) = valid_range(j, d);
                if need_w {
                    let mut acc = T::zero();
                    for t in lo..hi {
                        acc += grow[t] * xrow[t * d.stride + j - d.pad];
                    }
                    dw[wi] += acc;
                }
                if need_x {
                    let wv = w[wi];
                    let dxrow = &mut dx[c * d.len_in..(c + 1) * d.len_in];
                    for t in lo..hi {
                        dxrow[t * d.stride + j - d.pad] += wv * grow[t];
                    }
                }
            }
        }
    }
}
