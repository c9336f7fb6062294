//! Jacobian-augmented loss, fusion modes and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    build_model, cross_entropy_graph, forward, log_softmax, Activation, LayerSpec, ModelParams, ModelSpec, Mode, PredictionDist,
    Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::jsm::{classify, MaskParams, VolumeChange};

/// Which voxels the penalty weights emphasize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyWeighting {
    /// `q = w * JSM` with `w` from the weight mask: changed voxels carry the larger weight.
    #[default]
    EmphasizeChanged,
    /// Feature and debug weights exchanged, so flat regions carry the larger weight.
    EmphasizeUnchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JalConfig {
    pub lambda: f64,
    pub feature_weight: f64,
    pub debug_weight: f64,
    pub flat_tol: f64,
    pub weighting: PenaltyWeighting,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Recompute batchnorm statistics over the training set after the last epoch.
    pub recalibrate_bn: bool,
}

impl Default for JalConfig {
    fn default() -> Self {
        let m = MaskParams::default();
        Self {
            lambda: 1.0,
            feature_weight: m.feature_weight,
            debug_weight: m.debug_weight,
            flat_tol: m.flat_tol,
            weighting: PenaltyWeighting::EmphasizeChanged,
            epochs: 20,
            batch_size: 10,
            learning_rate: 0.01,
            seed: 0,
            recalibrate_bn: true,
        }
    }
}

impl JalConfig {
    pub fn mask_params(&self) -> MaskParams {
        MaskParams {
            feature_weight: self.feature_weight,
            debug_weight: self.debug_weight,
            flat_tol: self.flat_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.mask_params().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Late,
    Early,
}

/// The per-voxel penalty multiplier `q = w * JSM`.
pub fn penalty_map(jsm: &Tensor, cfg: &JalConfig) -> Tensor {
    let (fw, dw) = match cfg.weighting {
        PenaltyWeighting::EmphasizeChanged => (cfg.feature_weight, cfg.debug_weight),
        PenaltyWeighting::EmphasizeUnchanged => (cfg.debug_weight, cfg.feature_weight),
    };
    let mut q = jsm.clone();
    for v in q.data_mut() {
        let w = match classify(*v, cfg.flat_tol) {
            VolumeChange::None => dw,
            _ => fw,
        };
        *v *= w;
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JalTerms {
    pub total: f64,
    pub ce: f64,
    pub penalty: f64,
}

fn check_pair(x: &Tensor, jsm: &Tensor) -> Result<()> {
    if x.shape() != jsm.shape() {
        return Err(Error::input(format!(
            "saliency map shape {:?} does not match input {:?}",
            jsm.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Eval-mode loss on a `[N, C, D, H, W]` batch: mean cross-entropy plus
/// `lambda` times the mean per-sample penalty.
pub fn jal_loss(model: &ModelParams, x: &Tensor, labels: &[usize], jsm: &Tensor, cfg: &JalConfig) -> Result<JalTerms> {
    check_pair(x, jsm)?;
    let n = model.check_input(x)?;
    check_labels(labels, n, model.classes())?;
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params().iter().map(|p| tape.constant(p.clone())).collect();
    let input = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (z, _) = model.logits_graph(&mut tape, input, &params, Mode::Eval, &mut rng);
    let ls = log_softmax(&mut tape, z);
    let ce = cross_entropy_graph(&mut tape, ls, labels);
    let ce = tape.value(ce).item();
    if cfg.lambda == 0.0 {
        return Ok(JalTerms { total: ce, ce, penalty: 0.0 });
    }
    let q = penalty_map(jsm, cfg);
    let pen = model.penalty_graph(&mut tape, input, &params, &q)?;
    let penalty = tape.value(pen).item() / n as f64;
    Ok(JalTerms { total: ce + cfg.lambda * penalty, ce, penalty })
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::input(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub terms: JalTerms,
    pub correct: usize,
    pub samples: usize,
}

/// One SGD step on a batch. Cross-entropy uses train mode (dropout masks
/// seeded by `step_seed`, batch statistics); the penalty uses eval mode.
pub fn jal_step(
    model: &mut ModelParams,
    x: &Tensor,
    labels: &[usize],
    jsm: &Tensor,
    cfg: &JalConfig,
    step_seed: u64,
) -> Result<StepStats> {
    check_pair(x, jsm)?;
    let n = model.check_input(x)?;
    check_labels(labels, n, model.classes())?;
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let input = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let (z, stats) = model.logits_graph(&mut tape, input, &params, Mode::Train, &mut rng);
    let ls = log_softmax(&mut tape, z);
    let ce = cross_entropy_graph(&mut tape, ls, labels);
    let k = model.classes();
    let correct = tape
        .value(ls)
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count();
    let (root, penalty) = if cfg.lambda == 0.0 {
        (ce, 0.0)
    } else {
        let q = penalty_map(jsm, cfg);
        let xc = tape.constant(x.clone());
        let bstats = model.batch_stats_graph(&mut tape, xc, &params);
        let pen = model.penalty_graph_with(&mut tape, input, &params, &q, Some(&bstats))?;
        let pen = tape.scale(pen, 1.0 / n as f64);
        let weighted = tape.scale(pen, cfg.lambda);
        (tape.add(ce, weighted), tape.value(pen).item())
    };
    let ce_v = tape.value(ce).item();
    let total = tape.value(root).item();
    if !total.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite loss: ce {ce_v:e}, penalty {penalty:e}, lambda {}, total {total:e}",
            cfg.lambda
        )));
    }
    let grads = tape.grad(root, &params)?;
    for (p, g) in model.params_mut().iter_mut().zip(&grads) {
        let g = tape.value(*g);
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= cfg.learning_rate * d;
        }
    }
    model.update_running_stats(&stats);
    Ok(StepStats {
        terms: JalTerms { total, ce: ce_v, penalty },
        correct,
        samples: n,
    })
}

/// One modality-pair training example. `x` and `jsm` hold one `[1, D, H, W]`
/// tensor per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub x: [Tensor; 2],
    pub jsm: [Tensor; 2],
    pub label: usize,
}

/// Channel-concatenates two modalities and their saliency maps.
pub fn early_fusion_pack(x1: &Tensor, x2: &Tensor, j1: &Tensor, j2: &Tensor) -> Result<(Tensor, Tensor)> {
    let cat = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        if a.shape().len() != 4 || a.shape()[1..] != b.shape()[1..] || b.shape().len() != 4 {
            return Err(Error::input(format!("cannot fuse shapes {:?} and {:?}", a.shape(), b.shape())));
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::new(shape, data)
    };
    let x = cat(x1, x2)?;
    let j = cat(j1, j2)?;
    if x.shape() != j.shape() {
        return Err(Error::input("image and saliency shapes differ"));
    }
    Ok((x, j))
}

/// Elementwise mean of two distributions.
pub fn late_fusion_predict(p1: &PredictionDist, p2: &PredictionDist) -> Result<PredictionDist> {
    if p1.len() != p2.len() {
        return Err(Error::input(format!("cannot fuse {} and {} classes", p1.len(), p2.len())));
    }
    let mean: Vec<f64> = p1.probs().iter().zip(p2.probs()).map(|(a, b)| 0.5 * (a + b)).collect();
    let s: f64 = mean.iter().sum();
    PredictionDist::new(mean.into_iter().map(|v| v / s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub penalty: f64,
    pub total: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,ce,penalty,total,acc\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{}", r.epoch, r.ce, r.penalty, r.total, r.accuracy);
        }
        s
    }
}

/// Models produced by [`train`]: one for early fusion, one per modality for late fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub mode: FusionMode,
    pub models: Vec<ModelParams>,
    pub histories: Vec<TrainHistory>,
}

/// The model inputs for one branch: `[C, D, H, W]` image and saliency map.
pub fn branch_input(sample: &FusionSample, mode: FusionMode, branch: usize) -> Result<(Tensor, Tensor)> {
    match mode {
        FusionMode::Early => early_fusion_pack(&sample.x[0], &sample.x[1], &sample.jsm[0], &sample.jsm[1]),
        FusionMode::Late => Ok((sample.x[branch].clone(), sample.jsm[branch].clone())),
    }
}

fn branch_seed(seed: u64, branch: usize) -> u64 {
    seed ^ (branch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Architecture options for the two-block network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub activation: Activation,
    /// Rates of the two dropout layers.
    pub dropout: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            activation: Activation::default(),
            dropout: [0.5, 0.2],
        }
    }
}

/// Model for one branch of `mode` given samples of spatial side `side`.
pub fn branch_spec(mode: FusionMode, side: usize, model: &ModelConfig) -> ModelSpec {
    let channels = match mode {
        FusionMode::Early => 2,
        FusionMode::Late => 1,
    };
    let mut spec = ModelSpec::two_block(channels, side, model.activation);
    let mut rates = model.dropout.iter();
    for layer in spec.layers.iter_mut() {
        if let LayerSpec::Dropout { rate } = layer {
            if let Some(r) = rates.next() {
                *rate = *r;
            }
        }
    }
    spec
}

fn stack(items: Vec<Tensor>) -> Result<Tensor> {
    let refs: Vec<&Tensor> = items.iter().collect();
    Tensor::stack(&refs)
}

/// Trains one model on `(x, jsm, label)` triples.
pub fn train_branch(
    spec: &ModelSpec,
    inputs: &[(Tensor, Tensor, usize)],
    cfg: &JalConfig,
    seed: u64,
) -> Result<(ModelParams, TrainHistory)> {
    let mut model = build_model(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut pen, mut tot, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = stack(chunk.iter().map(|&i| inputs[i].0.clone()).collect())?;
            let j = stack(chunk.iter().map(|&i| inputs[i].1.clone()).collect())?;
            let y: Vec<usize> = chunk.iter().map(|&i| inputs[i].2).collect();
            let s = jal_step(&mut model, &x, &y, &j, cfg, rng.gen())?;
            let w = chunk.len() as f64;
            ce += s.terms.ce * w;
            pen += s.terms.penalty * w;
            tot += s.terms.total * w;
            correct += s.correct;
        }
        let n = inputs.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            ce: ce / n,
            penalty: pen / n,
            total: tot / n,
            accuracy: correct as f64 / n,
        });
        log::debug!("epoch {epoch}: ce {:.4} penalty {:.4e} acc {:.3}", ce / n, pen / n, correct as f64 / n);
    }
    if cfg.recalibrate_bn {
        let batches = (0..inputs.len())
            .collect::<Vec<_>>()
            .chunks(cfg.batch_size)
            .map(|c| stack(c.iter().map(|&i| inputs[i].0.clone()).collect()))
            .collect::<Result<Vec<_>>>()?;
        model.recalibrate_batchnorm(&batches)?;
    }
    Ok((model, history))
}

/// Trains the model(s) for `mode`. Late fusion trains one independent branch
/// per modality, each penalised with its own saliency map.
pub fn train(samples: &[FusionSample], mode: FusionMode, cfg: &JalConfig, model: &ModelConfig) -> Result<Trained> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::input("cannot train on an empty dataset"))?;
    let side = first.x[0].shape()[1];
    let branches = match mode {
        FusionMode::Early => 1,
        FusionMode::Late => 2,
    };
    let mut models = Vec::with_capacity(branches);
    let mut histories = Vec::with_capacity(branches);
    for b in 0..branches {
        let spec = branch_spec(mode, side, model);
        let inputs = samples
            .iter()
            .map(|s| branch_input(s, mode, b).map(|(x, j)| (x, j, s.label)))
            .collect::<Result<Vec<_>>>()?;
        let (m, h) = train_branch(&spec, &inputs, cfg, branch_seed(cfg.seed, b))?;
        models.push(m);
        histories.push(h);
    }
    Ok(Trained { mode, models, histories })
}

impl Trained {
    /// Eval-mode predictions, one per sample.
    pub fn predict(&self, samples: &[FusionSample]) -> Result<Vec<PredictionDist>> {
        let mut per_branch = Vec::with_capacity(self.models.len());
        for (b, m) in self.models.iter().enumerate() {
            let mut out = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(16) {
                let x = stack(chunk.iter().map(|s| branch_input(s, self.mode, b).map(|p| p.0)).collect::<Result<_>>()?)?;
                out.extend(forward(m, &x, Mode::Eval, 0)?.probs);
            }
            per_branch.push(out);
        }
        match self.mode {
            FusionMode::Early => Ok(per_branch.pop().unwrap_or_default()),
            FusionMode::Late => per_branch[0]
                .iter()
                .zip(&per_branch[1])
                .map(|(a, b)| late_fusion_predict(a, b))
                .collect(),
        }
    }
}
