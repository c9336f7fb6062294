use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Softplus { beta: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// Stride 1, zero padding `kernel / 2`.
    Conv3d { in_ch: usize, out_ch: usize, kernel: usize },
    /// `running = momentum * running + (1 - momentum) * batch`.
    BatchNorm3d { channels: usize, momentum: f64 },
    Activation(Activation),
    Dropout { rate: f64 },
    /// 2x2x2 window, stride 2.
    MaxPool3d,
    Flatten,
    Dense { inputs: usize, outputs: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::BatchNorm3d { .. } => "batchnorm3d",
            LayerSpec::Activation(Activation::Relu) => "relu",
            LayerSpec::Activation(Activation::Softplus { .. }) => "softplus",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MaxPool3d => "maxpool3d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv3d { in_ch, out_ch, kernel } => {
                vec![vec![out_ch, in_ch, kernel, kernel, kernel], vec![out_ch]]
            }
            LayerSpec::BatchNorm3d { channels, .. } => vec![vec![channels], vec![channels]],
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Volume([usize; 4]),
    Flat(usize),
}

/// Input extents `[C, D, H, W]` plus an ordered layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input: [usize; 4],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Two conv blocks (4 then 8 channels) and a dense classifier over 4
    /// classes, for a cubic input of side `side`.
    pub fn two_block(in_channels: usize, side: usize, activation: Activation) -> Self {
        let (c1, c2, k) = (4, 8, 4);
        let pooled = side / 4;
        Self {
            input: [in_channels, side, side, side],
            layers: vec![
                LayerSpec::Conv3d { in_ch: in_channels, out_ch: c1, kernel: 3 },
                LayerSpec::BatchNorm3d { channels: c1, momentum: 0.9 },
                LayerSpec::Activation(activation),
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::MaxPool3d,
                LayerSpec::Conv3d { in_ch: c1, out_ch: c2, kernel: 3 },
                LayerSpec::BatchNorm3d { channels: c2, momentum: 0.9 },
                LayerSpec::Activation(activation),
                LayerSpec::Dropout { rate: 0.2 },
                LayerSpec::MaxPool3d,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: c2 * pooled * pooled * pooled, outputs: k },
            ],
        }
    }

    /// Checks that consecutive layers compose; returns the output length.
    pub fn validate(&self) -> Result<usize> {
        if self.input.iter().any(|&v| v == 0) {
            return Err(Error::config(format!("input extents must be positive, got {:?}", self.input)));
        }
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let mut shape = Shape::Volume(self.input);
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { "input".to_string() } else { format!("layer {} ({})", i - 1, self.layers[i - 1].name()) };
            let fail = |msg: String| Error::config(format!("{prev} -> layer {i} ({}): {msg}", layer.name()));
            shape = match (*layer, shape) {
                (LayerSpec::Conv3d { in_ch, out_ch, kernel }, Shape::Volume([c, d, h, w])) => {
                    if c != in_ch {
                        return Err(fail(format!("expected {in_ch} channels, got {c}")));
                    }
                    if kernel % 2 == 0 || out_ch == 0 {
                        return Err(fail("kernel must be odd and out_ch positive".into()));
                    }
                    Shape::Volume([out_ch, d, h, w])
                }
                (LayerSpec::BatchNorm3d { channels, momentum }, Shape::Volume(s)) => {
                    if s[0] != channels {
                        return Err(fail(format!("expected {channels} channels, got {}", s[0])));
                    }
                    if !(0.0..1.0).contains(&momentum) {
                        return Err(fail(format!("momentum must be in [0, 1), got {momentum}")));
                    }
                    shape
                }
                (LayerSpec::Activation(Activation::Softplus { beta }), _) if !(beta > 0.0 && beta.is_finite()) => {
                    return Err(fail(format!("softplus beta must be positive, got {beta}")));
                }
                (LayerSpec::Activation(_), _) => shape,
                (LayerSpec::Dropout { rate }, _) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(fail(format!("dropout rate must be in [0, 1), got {rate}")));
                    }
                    shape
                }
                (LayerSpec::MaxPool3d, Shape::Volume([c, d, h, w])) => {
                    if d < 2 || h < 2 || w < 2 {
                        return Err(fail(format!("spatial extent {:?} too small to pool", [d, h, w])));
                    }
                    Shape::Volume([c, d / 2, h / 2, w / 2])
                }
                (LayerSpec::Flatten, Shape::Volume(s)) => Shape::Flat(s.iter().product()),
                (LayerSpec::Dense { inputs, outputs }, Shape::Flat(n)) => {
                    if n != inputs {
                        return Err(fail(format!("expected {inputs} inputs, got {n}")));
                    }
                    if outputs == 0 {
                        return Err(fail("dense layer needs at least one output".into()));
                    }
                    Shape::Flat(outputs)
                }
                (_, s) => return Err(fail(format!("cannot accept input of shape {s:?}"))),
            };
        }
        match shape {
            Shape::Flat(k) => Ok(k),
            Shape::Volume(s) => Err(Error::config(format!("model output has volume shape {s:?}; end with flatten and dense"))),
        }
    }

    /// Extent of the input to each dense layer, in order.
    pub fn dense_inputs(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { inputs, .. } => Some(*inputs),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where batchnorm layers take their statistics from.
#[derive(Clone, Copy)]
enum Norm<'a> {
    Batch { dropout: bool },
    Running,
    Given(&'a [(Var, Var)]),
}

/// Parameters and batchnorm running statistics for a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    classes: usize,
    params: Vec<Tensor>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

/// He-initialized parameters, deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let classes = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut running = Vec::new();
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv3d { in_ch, out_ch, kernel } => {
                let fan_in = in_ch * kernel * kernel * kernel;
                params.push(he_tensor(&mut rng, &[out_ch, in_ch, kernel, kernel, kernel], fan_in));
                params.push(Tensor::zeros(&[out_ch]));
            }
            LayerSpec::BatchNorm3d { channels, .. } => {
                params.push(Tensor::full(&[channels], 1.0));
                params.push(Tensor::zeros(&[channels]));
                running.push((vec![0.0; channels], vec![1.0; channels]));
            }
            LayerSpec::Dense { inputs, outputs } => {
                params.push(he_tensor(&mut rng, &[outputs, inputs], inputs));
                params.push(Tensor::zeros(&[outputs]));
            }
            _ => {}
        }
    }
    Ok(ModelParams { spec: spec.clone(), classes, params, running })
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Batch statistics of one batchnorm layer from a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ModelParams {
    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<Tensor>, running: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let classes = spec.validate()?;
        let shapes: Vec<Vec<usize>> = spec.layers.iter().flat_map(|l| l.param_shapes()).collect();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::input("parameter tensors do not match the layer table"));
        }
        let bn: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm3d { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect();
        if bn.len() != running.len() || bn.iter().zip(&running).any(|(c, (m, v))| m.len() != *c || v.len() != *c) {
            return Err(Error::input("running statistics do not match the layer table"));
        }
        Ok(Self { spec, classes, params, running })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Parameter tensors in declaration order (weight then bias, or scale then shift).
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Per batchnorm layer `(running_mean, running_var)`.
    pub fn running_stats(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.running
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let momenta: Vec<f64> = self
            .spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm3d { momentum, .. } => Some(*momentum),
                _ => None,
            })
            .collect();
        for (((rm, rv), s), m) in self.running.iter_mut().zip(stats).zip(momenta) {
            for (r, b) in rm.iter_mut().zip(&s.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in rv.iter_mut().zip(&s.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Checks `x` is `[N, C, D, H, W]` with `[C, D, H, W]` equal to the spec input.
    pub fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 5 || s[0] == 0 || s[1..] != self.spec.input {
            return Err(Error::input(format!(
                "input shape {s:?} does not match [N, {}, {}, {}, {}]",
                self.spec.input[0], self.spec.input[1], self.spec.input[2], self.spec.input[3]
            )));
        }
        Ok(s[0])
    }

    /// Records the network on `tape`, returning `[N, K]` logits and the batch
    /// statistics of every batchnorm layer (empty in eval mode).
    pub fn logits_graph(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> (Var, Vec<BatchStats>) {
        let norm = match mode {
            Mode::Train => Norm::Batch { dropout: true },
            Mode::Eval => Norm::Running,
        };
        let (z, stats, _) = self.logits_graph_impl(tape, x, params, norm, rng, false);
        (z, stats)
    }

    /// Records dropout-free batch statistics of `x` as `(mean, var)` per
    /// batchnorm layer, differentiable in the parameters.
    pub fn batch_stats_graph(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Vec<(Var, Var)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.logits_graph_impl(tape, x, params, Norm::Batch { dropout: false }, &mut rng, false).2
    }

    /// Replaces the running statistics with population statistics of `batches`,
    /// one layer at a time so each layer sees the recalibrated layers below it.
    pub fn recalibrate_batchnorm(&mut self, batches: &[Tensor]) -> Result<()> {
        for b in batches {
            self.check_input(b)?;
        }
        let total: usize = batches.iter().map(|b| b.shape()[0]).sum();
        if total == 0 {
            return Ok(());
        }
        for layer in 0..self.running.len() {
            let c = self.running[layer].0.len();
            let (mut m1, mut m2) = (vec![0.0; c], vec![0.0; c]);
            for b in batches {
                let mut tape = Tape::new();
                let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
                let x = tape.constant(b.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (_, stats, _) = self.logits_graph_impl(&mut tape, x, &params, Norm::Running, &mut rng, true);
                let w = b.shape()[0] as f64 / total as f64;
                for ch in 0..c {
                    let (mu, var) = (stats[layer].mean[ch], stats[layer].var[ch]);
                    m1[ch] += w * mu;
                    m2[ch] += w * (var + mu * mu);
                }
            }
            let var = m1.iter().zip(&m2).map(|(a, b)| (b - a * a).max(0.0)).collect();
            self.running[layer] = (m1, var);
        }
        Ok(())
    }

    fn logits_graph_impl(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        norm: Norm,
        rng: &mut ChaCha8Rng,
        eval_stats: bool,
    ) -> (Var, Vec<BatchStats>, Vec<(Var, Var)>) {
        let mut h = x;
        let mut pi = 0;
        let mut bn = 0;
        let mut stats = Vec::new();
        let mut stat_vars = Vec::new();
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Conv3d { .. } => {
                    let c = tape.conv3d(h, params[pi]);
                    h = tape.add_channels(c, params[pi + 1]);
                    pi += 2;
                }
                LayerSpec::BatchNorm3d { .. } => {
                    let (gamma, beta) = (params[pi], params[pi + 1]);
                    h = match norm {
                        Norm::Batch { .. } => {
                            let (y, s, v) = batchnorm_train(tape, h, gamma, beta);
                            stats.push(s);
                            stat_vars.push(v);
                            y
                        }
                        Norm::Running => {
                            if eval_stats {
                                stats.push(channel_stats(tape.value(h)));
                            }
                            batchnorm_eval(tape, h, gamma, beta, &self.running[bn])
                        }
                        Norm::Given(given) => batchnorm_given(tape, h, gamma, beta, given[bn]),
                    };
                    pi += 2;
                    bn += 1;
                }
                LayerSpec::Activation(Activation::Relu) => h = tape.relu(h),
                LayerSpec::Activation(Activation::Softplus { beta }) => h = tape.softplus(h, beta),
                LayerSpec::Dropout { rate } => {
                    if matches!(norm, Norm::Batch { dropout: true }) && rate > 0.0 {
                        let keep = 1.0 - rate;
                        let cut = (keep * 4294967296.0).min(u32::MAX as f64) as u32;
                        let mask: Vec<f64> = (0..tape.value(h).len())
                            .map(|_| if rng.gen::<u32>() < cut { 1.0 / keep } else { 0.0 })
                            .collect();
                        h = tape.mul_mask(h, Arc::new(mask));
                    }
                }
                LayerSpec::MaxPool3d => h = maxpool(tape, h),
                LayerSpec::Flatten => {
                    let sh = tape.shape(h).to_vec();
                    h = tape.reshape(h, &[sh[0], sh[1..].iter().product()]);
                }
                LayerSpec::Dense { .. } => {
                    let z = tape.matmul(h, params[pi], false, true);
                    h = tape.add_channels(z, params[pi + 1]);
                    pi += 2;
                }
            }
        }
        (h, stats, stat_vars)
    }

    /// Records `d(sum_n sum_k log p_nk)/dx` in eval mode; differentiable in the parameters.
    pub fn input_gradient_graph(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        self.input_gradient_graph_with(tape, x, params, None)
    }

    /// As [`Self::input_gradient_graph`], normalising with `stats` (see
    /// [`Self::batch_stats_graph`]) instead of the running statistics.
    pub fn input_gradient_graph_with(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        stats: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let norm = match stats {
            Some(s) => {
                if s.len() != self.running.len() {
                    return Err(Error::input(format!(
                        "{} statistic pairs for {} batchnorm layers",
                        s.len(),
                        self.running.len()
                    )));
                }
                Norm::Given(s)
            }
            None => Norm::Running,
        };
        let (z, _, _) = self.logits_graph_impl(tape, x, params, norm, &mut rng, false);
        let ls = log_softmax(tape, z);
        let s = tape.sum(ls);
        Ok(tape.grad(s, &[x])?[0])
    }

    /// Records `sum_{n,p} (q_p g_p)^2` where `g` is the eval-mode input gradient.
    pub fn penalty_graph(&self, tape: &mut Tape, x: Var, params: &[Var], q: &Tensor) -> Result<Var> {
        self.penalty_graph_with(tape, x, params, q, None)
    }

    pub fn penalty_graph_with(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        q: &Tensor,
        stats: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        if q.len() != tape.value(x).len() {
            return Err(Error::input(format!(
                "penalty map shape {:?} does not match input {:?}",
                q.shape(),
                tape.shape(x)
            )));
        }
        let g = self.input_gradient_graph_with(tape, x, params, stats)?;
        let qg = tape.mul_mask(g, Arc::new(q.data().to_vec()));
        let sq = tape.mul(qg, qg);
        Ok(tape.sum(sq))
    }
}

fn channel_stats(t: &Tensor) -> BatchStats {
    let sh = t.shape();
    let (n, c) = (sh[0], sh[1]);
    let vol: usize = sh[2..].iter().product();
    let m = (n * vol) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, block) in t.data().chunks(vol).enumerate() {
        mean[i % c] += block.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for (i, block) in t.data().chunks(vol).enumerate() {
        var[i % c] += block.iter().map(|v| (v - mean[i % c]).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    BatchStats { mean, var }
}

fn batchnorm_train(tape: &mut Tape, h: Var, gamma: Var, beta: Var) -> (Var, BatchStats, (Var, Var)) {
    let sh = tape.shape(h).to_vec();
    let m = (sh[0] * sh[2..].iter().product::<usize>()) as f64;
    let s = tape.sum_channels(h);
    let mean = tape.scale(s, 1.0 / m);
    let neg = tape.scale(mean, -1.0);
    let xc = tape.add_channels(h, neg);
    let ss = tape.channel_dot(xc, xc);
    let var = tape.scale(ss, 1.0 / m);
    let ve = tape.add_scalar(var, BN_EPS);
    let inv = tape.rsqrt(ve);
    let scale = tape.mul(inv, gamma);
    let y = tape.mul_channels(xc, scale);
    let stats = BatchStats {
        mean: tape.value(mean).data().to_vec(),
        var: tape.value(var).data().to_vec(),
    };
    (tape.add_channels(y, beta), stats, (mean, var))
}

fn batchnorm_given(tape: &mut Tape, h: Var, gamma: Var, beta: Var, (mean, var): (Var, Var)) -> Var {
    let ve = tape.add_scalar(var, BN_EPS);
    let inv = tape.rsqrt(ve);
    let scale = tape.mul(inv, gamma);
    let shift = tape.mul(mean, scale);
    let shift = tape.sub(beta, shift);
    let y = tape.mul_channels(h, scale);
    tape.add_channels(y, shift)
}

fn batchnorm_eval(tape: &mut Tape, h: Var, gamma: Var, beta: Var, running: &(Vec<f64>, Vec<f64>)) -> Var {
    let c = tape.shape(h)[1];
    let inv: Vec<f64> = running.1.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let inv = tape.constant(Tensor::new(vec![c], inv).expect("shape"));
    let neg_mean = tape.constant(Tensor::new(vec![c], running.0.iter().map(|m| -m).collect()).expect("shape"));
    let scale = tape.mul(inv, gamma);
    let shift = tape.mul(neg_mean, scale);
    let shift = tape.add(shift, beta);
    let y = tape.mul_channels(h, scale);
    tape.add_channels(y, shift)
}

fn maxpool(tape: &mut Tape, h: Var) -> Var {
    let sh = tape.shape(h).to_vec();
    let (n, c, d, hh, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let (od, oh, ow) = (d / 2, hh / 2, w / 2);
    let v = tape.value(h).data();
    let mut idx = Vec::with_capacity(n * c * od * oh * ow);
    for slab in 0..n * c {
        let base = slab * d * hh * w;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + ((2 * z) * hh + 2 * y) * w + 2 * x;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * hh + 2 * y + dy) * w + 2 * x + dx;
                                if v[i] > v[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    tape.gather(h, Arc::new(idx), &[n, c, od, oh, ow])
}

/// Row-wise log-softmax of `[N, K]` logits.
pub fn log_softmax(tape: &mut Tape, z: Var) -> Var {
    let sh = tape.shape(z).to_vec();
    let k = sh[1];
    let shift: Vec<f64> = tape
        .value(z)
        .data()
        .chunks(k)
        .flat_map(|row| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            std::iter::repeat(m).take(k)
        })
        .collect();
    let shift = tape.constant(Tensor::new(sh, shift).expect("shape"));
    let zs = tape.sub(z, shift);
    let e = tape.exp(zs);
    let s = tape.sum_last(e);
    let ls = tape.log(s);
    let lb = tape.broadcast_last(ls, k);
    tape.sub(zs, lb)
}

/// Mean over the batch of `-max(log p_{n, y_n}, ln 1e-12)`.
pub fn cross_entropy_graph(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Var {
    let sh = tape.shape(log_probs).to_vec();
    let (n, k) = (sh[0], sh[1]);
    let floored = tape.clamp_min(log_probs, PROB_FLOOR.ln());
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let picked = tape.mul_mask(floored, Arc::new(onehot));
    let s = tape.sum(picked);
    tape.scale(s, -1.0 / n as f64)
}

/// Class probabilities for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDist(Vec<f64>);

impl PredictionDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let s: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("not a probability distribution: {probs:?}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(pred: &PredictionDist, label: usize) -> f64 {
    -pred.0[label].max(PROB_FLOOR).ln()
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    pub params: Vec<Var>,
    pub logits: Var,
    pub log_probs: Var,
    pub probs: Vec<PredictionDist>,
    pub batch_stats: Vec<BatchStats>,
}

/// Runs the model on a `[N, C, D, H, W]` batch. Dropout masks derive from `seed`.
pub fn forward(model: &ModelParams, x: &Tensor, mode: Mode, seed: u64) -> Result<ForwardPass> {
    model.check_input(x)?;
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let input = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (logits, batch_stats) = model.logits_graph(&mut tape, input, &params, mode, &mut rng);
    let log_probs = log_softmax(&mut tape, logits);
    let k = model.classes;
    let probs = tape
        .value(log_probs)
        .data()
        .chunks(k)
        .map(|row| {
            let p: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let s: f64 = p.iter().sum();
            PredictionDist(p.into_iter().map(|v| v / s).collect())
        })
        .collect();
    Ok(ForwardPass { tape, input, params, logits, log_probs, probs, batch_stats })
}

/// `d(sum_k log p_k)/dx` in eval mode, shaped like `x`.
pub fn input_gradient(model: &ModelParams, x: &Tensor) -> Result<Tensor> {
    model.check_input(x)?;
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.constant(p.clone())).collect();
    let input = tape.leaf(x.clone());
    let g = model.input_gradient_graph(&mut tape, input, &params)?;
    Ok(tape.value(g).clone())
}

/// Value and parameter gradients of `sum_p (q_p * input_gradient_p)^2`.
pub fn penalty_param_gradient(model: &ModelParams, x: &Tensor, q: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    model.check_input(x)?;
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let input = tape.leaf(x.clone());
    let pen = model.penalty_graph(&mut tape, input, &params, q)?;
    let grads = tape.grad(pen, &params)?;
    Ok((tape.value(pen).item(), grads.into_iter().map(|g| tape.value(g).clone()).collect()))
}
