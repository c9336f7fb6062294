use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Rsqrt(Var),
    Sigmoid(Var, f64),
    Softplus(Var, f64),
    MulMask(Var, Arc<Vec<f64>>),
    Sum(Var),
    Expand(Var),
    SumChannels(Var),
    BroadcastChannels(Var),
    AddChannels(Var, Var),
    MulChannels(Var, Var),
    ChannelDot(Var, Var),
    SumLast(Var),
    BroadcastLast(Var),
    Reshape(Var),
    Conv(Var, Var),
    ConvT(Var, Var),
    ConvW(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    MatMul(Var, Var, bool, bool),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf | Const => [None, None],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddChannels(a, b)
            | MulChannels(a, b)
            | ChannelDot(a, b)
            | Conv(a, b)
            | ConvT(a, b)
            | ConvW(a, b)
            | MatMul(a, b, ..) => {
                [Some(a), Some(b)]
            }
            Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Recip(a) | Rsqrt(a) | Sigmoid(a, _) | Softplus(a, _)
            | MulMask(a, _) | Sum(a) | Expand(a) | SumChannels(a) | BroadcastChannels(a) | SumLast(a)
            | BroadcastLast(a) | Reshape(a) | Gather(a, _) | ScatterAdd(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation. Gradients are themselves recorded, so a gradient can be
/// differentiated again.
///
/// Operation methods panic on shape mismatches; shapes are validated at the
/// model boundary.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

impl Tape {
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
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.leaves.push(v);
        v
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |p, q| p + q);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |p, q| p - q);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |p, q| p * q);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|p| c * p);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|p| p + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|p| 1.0 / p);
        self.push(t, Op::Recip(a))
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|p| 1.0 / p.sqrt());
        self.push(t, Op::Rsqrt(a))
    }

    /// `1 / (1 + exp(-beta * a))`
    pub fn sigmoid(&mut self, a: Var, beta: f64) -> Var {
        let t = self.value(a).map(|p| sigmoid(beta * p));
        self.push(t, Op::Sigmoid(a, beta))
    }

    /// `ln(1 + exp(beta * a)) / beta`
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        let t = self.value(a).map(|p| softplus(beta * p) / beta);
        self.push(t, Op::Softplus(a, beta))
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_mask(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Var {
        assert_eq!(mask.len(), self.value(a).len(), "mask length mismatch");
        let mut t = self.value(a).clone();
        for (v, m) in t.data_mut().iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        self.push(t, Op::MulMask(a, mask))
    }

    /// `max(a, lo)`, with derivative 0 below `lo` and 1 above.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let mask: Vec<f64> = self.value(a).data().iter().map(|&v| if v > lo { 1.0 } else { 0.0 }).collect();
        let masked = self.mul_mask(a, Arc::new(mask.clone()));
        if lo == 0.0 {
            return masked;
        }
        let fill: Vec<f64> = mask.iter().map(|m| (1.0 - m) * lo).collect();
        let fill = self.constant(Tensor::new(self.shape(a).to_vec(), fill).expect("shape"));
        self.add(masked, fill)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.clamp_min(a, 0.0)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = Tensor::full(shape, self.value(a).item());
        self.push(t, Op::Expand(a))
    }

    /// `[N, C, ...]` summed over every axis except 1, giving `[C]`.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let sh = self.shape(a);
        let (n, c) = (sh[0], sh[1]);
        let inner: usize = sh[2..].iter().product();
        let d = self.value(a).data();
        let mut out = vec![0.0; c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let s = (b * c + ch) * inner;
                *o += d[s..s + inner].iter().sum::<f64>();
            }
        }
        self.push(Tensor::new(vec![c], out).expect("shape"), Op::SumChannels(a))
    }

    /// `[C]` broadcast along axis 1 of `shape`.
    fn channel_map(&self, a: Var, c: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let sh = self.shape(a);
        let ch = sh[1];
        assert_eq!(self.value(c).len(), ch, "channel count mismatch");
        let inner: usize = sh[2..].iter().product();
        let cv = self.value(c).data();
        let mut t = self.value(a).clone();
        if inner > 0 {
            for (i, block) in t.data_mut().chunks_mut(inner).enumerate() {
                let k = cv[i % ch];
                block.iter_mut().for_each(|v| *v = f(*v, k));
            }
        }
        t
    }

    /// `a[n, c, ..] + v[c]`.
    pub fn add_channels(&mut self, a: Var, v: Var) -> Var {
        let t = self.channel_map(a, v, |x, k| x + k);
        self.push(t, Op::AddChannels(a, v))
    }

    /// `a[n, c, ..] * v[c]`.
    pub fn mul_channels(&mut self, a: Var, v: Var) -> Var {
        let t = self.channel_map(a, v, |x, k| x * k);
        self.push(t, Op::MulChannels(a, v))
    }

    /// Per-channel inner product `sum_{n, ..} a[n, c, ..] * b[n, c, ..]`.
    pub fn channel_dot(&mut self, a: Var, b: Var) -> Var {
        let sh = self.shape(a);
        assert_eq!(sh, self.shape(b), "channel_dot shape mismatch");
        let (n, c) = (sh[0], sh[1]);
        let inner: usize = sh[2..].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; c];
        for bi in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let s = (bi * c + ch) * inner;
                *o += da[s..s + inner].iter().zip(&db[s..s + inner]).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        self.push(Tensor::new(vec![c], out).expect("shape"), Op::ChannelDot(a, b))
    }

    pub fn broadcast_channels(&mut self, a: Var, shape: &[usize]) -> Var {
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(self.value(a).len(), c, "channel count mismatch");
        let inner: usize = shape[2..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * inner);
        for _ in 0..n {
            for &v in src {
                out.extend(std::iter::repeat(v).take(inner));
            }
        }
        self.push(Tensor::new(shape.to_vec(), out).expect("shape"), Op::BroadcastChannels(a))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let sh = self.shape(a).to_vec();
        let k = *sh.last().expect("rank >= 1");
        let out: Vec<f64> = self.value(a).data().chunks(k).map(|c| c.iter().sum()).collect();
        let mut osh = sh[..sh.len() - 1].to_vec();
        if osh.is_empty() {
            osh.push(1);
        }
        self.push(Tensor::new(osh, out).expect("shape"), Op::SumLast(a))
    }

    /// Repeat every entry `k` times along a new last axis.
    pub fn broadcast_last(&mut self, a: Var, k: usize) -> Var {
        let mut sh = self.shape(a).to_vec();
        sh.push(k);
        let out: Vec<f64> = self.value(a).data().iter().flat_map(|&v| std::iter::repeat(v).take(k)).collect();
        self.push(Tensor::new(sh, out).expect("shape"), Op::BroadcastLast(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a))
    }

    /// 3D convolution, x `[N, I, D, H, W]`, w `[O, I, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs[1], ws[1], "conv input channels mismatch");
        let out = kernels::conv3d(self.value(x).data(), &xs, self.value(w).data(), &ws);
        let t = Tensor::new(vec![xs[0], ws[0], xs[2], xs[3], xs[4]], out).expect("shape");
        self.push(t, Op::Conv(x, w))
    }

    fn conv3d_transpose(&mut self, g: Var, w: Var) -> Var {
        let (gs, ws) = (self.shape(g).to_vec(), self.shape(w).to_vec());
        let out = kernels::conv3d_transpose(self.value(g).data(), &gs, self.value(w).data(), &ws);
        let t = Tensor::new(vec![gs[0], ws[1], gs[2], gs[3], gs[4]], out).expect("shape");
        self.push(t, Op::ConvT(g, w))
    }

    fn conv3d_weight(&mut self, x: Var, g: Var, k: usize) -> Var {
        let (xs, gs) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        let out = kernels::conv3d_weight(self.value(x).data(), &xs, self.value(g).data(), &gs, k);
        let t = Tensor::new(vec![gs[1], xs[1], k, k, k], out).expect("shape");
        self.push(t, Op::ConvW(x, g))
    }

    /// `out[j] = a[idx[j]]`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(idx.len(), shape.iter().product::<usize>());
        let src = self.value(a).data();
        let out: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(shape.to_vec(), out).expect("shape"), Op::Gather(a, idx))
    }

    fn scatter_add(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let mut out = vec![0.0; shape.iter().product()];
        for (&i, &v) in idx.iter().zip(self.value(a).data()) {
            out[i] += v;
        }
        self.push(Tensor::new(shape.to_vec(), out).expect("shape"), Op::ScatterAdd(a, idx))
    }

    /// Matrix product of rank-2 tensors, each optionally transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (out, sh) = kernels::matmul(
            self.value(a).data(),
            self.shape(a),
            self.value(b).data(),
            self.shape(b),
            ta,
            tb,
        );
        self.push(Tensor::new(sh.to_vec(), out).expect("shape"), Op::MatMul(a, b, ta, tb))
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let t = Tensor::zeros(self.shape(v));
        self.constant(t)
    }

    /// Vector-Jacobian products of node `y` for upstream `g`, restricted to
    /// inputs flagged in `want`.
    fn vjp(&mut self, y: Var, g: Var, want: &[bool]) -> Vec<(Var, Var)> {
        use Op::*;
        let op = self.nodes[y.0].op.clone();
        let w = |v: Var| want[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Leaf | Const => {}
            Add(a, b) => {
                if w(a) {
                    out.push((a, g));
                }
                if w(b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if w(a) {
                    out.push((a, g));
                }
                if w(b) {
                    let n = self.scale(g, -1.0);
                    out.push((b, n));
                }
            }
            Mul(a, b) => {
                if w(a) {
                    let t = self.mul(g, b);
                    out.push((a, t));
                }
                if w(b) {
                    let t = self.mul(g, a);
                    out.push((b, t));
                }
            }
            Scale(a, c) => {
                let t = self.scale(g, c);
                out.push((a, t));
            }
            AddScalar(a) => out.push((a, g)),
            Exp(a) => {
                let t = self.mul(g, y);
                out.push((a, t));
            }
            Log(a) => {
                let r = self.recip(a);
                let t = self.mul(g, r);
                out.push((a, t));
            }
            Recip(a) => {
                let y2 = self.mul(y, y);
                let t = self.mul(g, y2);
                let t = self.scale(t, -1.0);
                out.push((a, t));
            }
            Rsqrt(a) => {
                let y2 = self.mul(y, y);
                let y3 = self.mul(y2, y);
                let t = self.mul(g, y3);
                let t = self.scale(t, -0.5);
                out.push((a, t));
            }
            Sigmoid(a, beta) => {
                let y2 = self.mul(y, y);
                let d = self.sub(y, y2);
                let t = self.mul(g, d);
                let t = self.scale(t, beta);
                out.push((a, t));
            }
            Softplus(a, beta) => {
                let s = self.sigmoid(a, beta);
                let t = self.mul(g, s);
                out.push((a, t));
            }
            MulMask(a, m) => {
                let t = self.mul_mask(g, m);
                out.push((a, t));
            }
            Sum(a) => {
                let sh = self.shape(a).to_vec();
                let t = self.expand(g, &sh);
                out.push((a, t));
            }
            Expand(a) => {
                let t = self.sum(g);
                out.push((a, t));
            }
            SumChannels(a) => {
                let sh = self.shape(a).to_vec();
                let t = self.broadcast_channels(g, &sh);
                out.push((a, t));
            }
            BroadcastChannels(a) => {
                let t = self.sum_channels(g);
                out.push((a, t));
            }
            AddChannels(a, v) => {
                if w(a) {
                    out.push((a, g));
                }
                if w(v) {
                    let t = self.sum_channels(g);
                    out.push((v, t));
                }
            }
            MulChannels(a, v) => {
                if w(a) {
                    let t = self.mul_channels(g, v);
                    out.push((a, t));
                }
                if w(v) {
                    let t = self.channel_dot(g, a);
                    out.push((v, t));
                }
            }
            ChannelDot(a, b) => {
                if w(a) {
                    let t = self.mul_channels(b, g);
                    out.push((a, t));
                }
                if w(b) {
                    let t = self.mul_channels(a, g);
                    out.push((b, t));
                }
            }
            SumLast(a) => {
                let sh = self.shape(a).to_vec();
                let k = *sh.last().expect("rank");
                let t = self.broadcast_last(g, k);
                let t = self.reshape(t, &sh);
                out.push((a, t));
            }
            BroadcastLast(a) => {
                let t = self.sum_last(g);
                let sh = self.shape(a).to_vec();
                let t = self.reshape(t, &sh);
                out.push((a, t));
            }
            Reshape(a) => {
                let sh = self.shape(a).to_vec();
                let t = self.reshape(g, &sh);
                out.push((a, t));
            }
            Conv(x, wt) => {
                if w(x) {
                    let t = self.conv3d_transpose(g, wt);
                    out.push((x, t));
                }
                if w(wt) {
                    let k = self.shape(wt)[2];
                    let t = self.conv3d_weight(x, g, k);
                    out.push((wt, t));
                }
            }
            ConvT(g0, wt) => {
                if w(g0) {
                    let t = self.conv3d(g, wt);
                    out.push((g0, t));
                }
                if w(wt) {
                    let k = self.shape(wt)[2];
                    let t = self.conv3d_weight(g, g0, k);
                    out.push((wt, t));
                }
            }
            ConvW(x, g0) => {
                if w(x) {
                    let t = self.conv3d_transpose(g0, g);
                    out.push((x, t));
                }
                if w(g0) {
                    let t = self.conv3d(x, g);
                    out.push((g0, t));
                }
            }
            Gather(a, idx) => {
                let sh = self.shape(a).to_vec();
                let t = self.scatter_add(g, idx, &sh);
                out.push((a, t));
            }
            ScatterAdd(a, idx) => {
                let sh = self.shape(a).to_vec();
                let t = self.gather(g, idx, &sh);
                out.push((a, t));
            }
            MatMul(a, b, ta, tb) => {
                if w(a) {
                    let t = if ta { self.matmul(b, g, tb, true) } else { self.matmul(g, b, false, !tb) };
                    out.push((a, t));
                }
                if w(b) {
                    let t = if tb { self.matmul(g, a, true, ta) } else { self.matmul(a, g, !ta, false) };
                    out.push((b, t));
                }
            }
        }
        out
    }

    /// Gradients of the one-element `root` with respect to `wrt`, recorded on
    /// this tape so they can be differentiated again. Inputs that `root` does
    /// not depend on get a zero constant.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "gradient root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut relevant = vec![false; n];
        for v in wrt {
            if v.0 < n {
                relevant[v.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.inputs().iter().flatten().any(|j| relevant[j.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[root.0] {
            let seed = Tensor::full(self.shape(root), 1.0);
            adj[root.0] = Some(self.constant(seed));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !relevant[i] {
                continue;
            }
            for (input, gi) in self.vjp(Var(i), g, &relevant) {
                adj[input.0] = Some(match adj[input.0] {
                    None => gi,
                    Some(prev) => self.add(prev, gi),
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|&v| match adj.get(v.0).copied().flatten() {
                Some(g) => g,
                None => self.zeros_like(v),
            })
            .collect())
    }

    /// First-order gradients of `root` with respect to every leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let leaves = self.leaves.clone();
        let vars = self.grad(root, &leaves)?;
        Ok(Gradients {
            map: leaves.into_iter().zip(vars).map(|(l, g)| (l, self.value(g).clone())).collect(),
        })
    }
}
