//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use jsmkit::diffnet::*;
use jsmkit::harness::{ablate, confusion, per_class_metrics, ConfusionMatrix, ExperimentConfig};
use jsmkit::jal::*;
use jsmkit::jsm::compute_jsm;
use jsmkit::register::{
    mattes_mi, register, registration_cost, registration_cost_gradient, DisplacementField, RegistrationConfig,
};
use jsmkit::synthdata::{adasyn_oversample, generate_dataset, make_subject, make_template, PhantomSpec, Split};
use jsmkit::volume::Volume3D;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn interior(dims: [usize; 3], margin: usize) -> impl Iterator<Item = [usize; 3]> {
    let r = move |a: usize| margin..dims[a] - margin;
    r(2).flat_map(move |z| r(1).flat_map(move |y| r(0).map(move |x| [x, y, z])))
}

// ---------------------------------------------------------------- 1

/// Every layer type, on a 6^3 input with 2 channels.
fn every_layer_spec(act: Activation) -> ModelSpec {
    ModelSpec {
        input: [2, 6, 6, 6],
        layers: vec![
            LayerSpec::Conv3d { in_ch: 2, out_ch: 3, kernel: 3 },
            LayerSpec::BatchNorm3d { channels: 3, momentum: 0.9 },
            LayerSpec::Activation(act),
            LayerSpec::Dropout { rate: 0.3 },
            LayerSpec::MaxPool3d,
            LayerSpec::Conv3d { in_ch: 3, out_ch: 2, kernel: 3 },
            LayerSpec::BatchNorm3d { channels: 2, momentum: 0.9 },
            LayerSpec::Activation(act),
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 54, outputs: 4 },
        ],
    }
}

fn layer_gradients(act: Activation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = build_model(&every_layer_spec(act), seed).unwrap();
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6, 6], -1.0, 1.0);
    let labels = [rng.gen_range(0..4), rng.gen_range(0..4)];
    let loss = |m: &ModelParams, x: &Tensor| {
        let mut pass = forward(m, x, Mode::Train, seed).unwrap();
        let ce = cross_entropy_graph(&mut pass.tape, pass.log_probs, &labels);
        pass.tape.value(ce).item()
    };
    let mut pass = forward(&model, &x, Mode::Train, seed).unwrap();
    let ce = cross_entropy_graph(&mut pass.tape, pass.log_probs, &labels);
    let mut wrt = pass.params.clone();
    wrt.push(pass.input);
    let grads = pass.tape.grad(ce, &wrt).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().take(model.params().len()).enumerate() {
        let analytic = pass.tape.value(*g).clone();
        for e in 0..analytic.len() {
            let mut mp = model.clone();
            mp.params_mut()[pi].data_mut()[e] += h;
            let mut mm = model.clone();
            mm.params_mut()[pi].data_mut()[e] -= h;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], fd, 1e-6));
        }
    }
    let gx = pass.tape.value(*grads.last().unwrap()).clone();
    for e in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[e] += h;
        let mut xm = x.clone();
        xm.data_mut()[e] -= h;
        let fd = (loss(&model, &xp) - loss(&model, &xm)) / (2.0 * h);
        worst = worst.max(rel_err(gx.data()[e], fd, 1e-6));
    }
    worst
}

fn registration_gradient(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [6, 6, 6];
    let fixed = Volume3D::from_fn(dims, |_, _, _| rng.gen_range(0.0..1.0));
    let moving = Volume3D::from_fn(dims, |x, y, z| {
        (0.6 * x as f64).sin() + 0.5 * (0.8 * y as f64 + 0.3 * z as f64).cos() + rng.gen_range(0.0..0.2)
    });
    let field = DisplacementField::from_fn(dims, |_, _, _| {
        [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)]
    });
    let cfg = RegistrationConfig { alpha: 0.05, bins: 8, ..Default::default() };
    let (_, grad) = registration_cost_gradient(&field, &moving, &fixed, &cfg).unwrap();
    let scale = grad.as_slice().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..field.len() {
        for c in 0..3 {
            let shifted = |d: f64| {
                let mut v = field.as_slice().to_vec();
                v[i][c] += d;
                DisplacementField::new(dims, v).unwrap()
            };
            let fp = registration_cost(&shifted(h), &moving, &fixed, &cfg).unwrap();
            let fm = registration_cost(&shifted(-h), &moving, &fixed, &cfg).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(grad.as_slice()[i][c], fd, 1e-3 * scale));
        }
    }
    worst
}

fn penalty_gradient(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_model(&every_layer_spec(Activation::Softplus { beta: 10.0 }), seed).unwrap();
    model.update_running_stats(&[
        BatchStats { mean: vec![0.1, -0.2, 0.05], var: vec![0.8, 1.3, 0.6] },
        BatchStats { mean: vec![0.3, 0.0], var: vec![0.5, 2.0] },
    ]);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6, 6], -1.0, 1.0);
    let q = rand_tensor(&mut rng, x.shape(), 0.0, 1.5);
    let (_, grads) = penalty_param_gradient(&model, &x, &q).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let mut mp = model.clone();
            mp.params_mut()[pi].data_mut()[e] += h;
            let mut mm = model.clone();
            mm.params_mut()[pi].data_mut()[e] -= h;
            let fp = penalty_param_gradient(&mp, &x, &q).unwrap().0;
            let fm = penalty_param_gradient(&mm, &x, &q).unwrap().0;
            worst = worst.max(rel_err(g.data()[e], (fp - fm) / (2.0 * h), 1e-6));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let layers = [
        layer_gradients(Activation::Softplus { beta: 10.0 }, 11),
        layer_gradients(Activation::Relu, 12),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let reg = [21, 22].map(registration_gradient).into_iter().fold(0.0, f64::max);
    let pen = [31, 32].map(penalty_gradient).into_iter().fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        layers < 1e-4 && reg < 1e-4 && pen < 1e-3 && secs < 60.0,
        format!("layers {layers:.1e}, registration {reg:.1e} (< 1e-4); penalty {pen:.1e} (< 1e-3); {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn jsm_analytic() -> Outcome {
    let t = Instant::now();
    let zero = compute_jsm(&DisplacementField::zeros([7, 6, 5])).unwrap();
    let zero_err = zero.values().iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);

    let dil = compute_jsm(&DisplacementField::from_fn([8, 8, 8], |x, y, z| [0.1 * x, 0.1 * y, 0.1 * z])).unwrap();
    let dil_err = interior([8, 8, 8], 1).map(|[x, y, z]| (dil.get(x, y, z) - 1.331).abs()).fold(0.0, f64::max);

    let (s, c) = 10f64.to_radians().sin_cos();
    let rot = DisplacementField::from_fn([12, 12, 12], |x, y, _| {
        let (u, v) = (x - 5.5, y - 5.5);
        [c * u - s * v - u, s * u + c * v - v, 0.0]
    });
    let rot = compute_jsm(&rot).unwrap();
    let rot_err = interior([12, 12, 12], 1).map(|[x, y, z]| (rot.get(x, y, z) - 1.0).abs()).fold(0.0, f64::max);

    let shear = compute_jsm(&DisplacementField::from_fn([6, 6, 6], |_, y, z| [0.3 * y - 0.2 * z, 0.0, 0.0])).unwrap();
    let shear_exact = interior([6, 6, 6], 1).all(|[x, y, z]| shear.get(x, y, z) == 1.0);
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        zero_err <= 1e-12 && dil_err <= 1e-6 && rot_err <= 1e-3 && shear_exact && secs < 5.0,
        format!(
            "zero {zero_err:.1e}, dilation {dil_err:.1e}, rotation {rot_err:.1e}, shear exact {shear_exact}; {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn recovery_phantom(p: [f64; 3]) -> f64 {
    let blobs: [([f64; 3], f64, f64); 8] = [
        ([16.0, 16.0, 16.0], 7.0, 0.5),
        ([9.0, 11.0, 12.0], 3.0, 0.7),
        ([22.0, 10.0, 18.0], 3.5, -0.4),
        ([12.0, 22.0, 20.0], 4.0, 0.6),
        ([21.0, 21.0, 10.0], 3.0, 0.5),
        ([16.0, 8.0, 24.0], 2.5, 0.8),
        ([8.0, 18.0, 8.0], 2.5, -0.3),
        ([24.0, 16.0, 24.0], 3.0, 0.4),
    ];
    blobs
        .iter()
        .map(|(c, r, a)| {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            a * (-d2 / (2.0 * r * r)).exp()
        })
        .sum::<f64>()
        + 0.3 * (0.45 * p[0]).sin() * (0.38 * p[1]).cos() * (0.31 * p[2] + 0.5).sin()
}

/// Sinusoidal displacement, 2 voxels at most, vanishing on the border.
fn sinusoid(p: [f64; 3]) -> [f64; 3] {
    let s = |t: f64| (PI * t / 31.0).sin();
    [2.0 * s(p[0]) * s(p[1]), 1.5 * s(p[1]) * s(p[2]), 1.5 * s(p[2]) * s(p[0])]
}

fn registration_recovery() -> Outcome {
    let dims = [32, 32, 32];
    let fixed = Volume3D::from_fn(dims, |x, y, z| recovery_phantom([x as f64, y as f64, z as f64]));
    // moving(q) = fixed(p) with p + v(p) = q, solved by fixed-point iteration
    let moving = Volume3D::from_fn(dims, |x, y, z| {
        let q = [x as f64, y as f64, z as f64];
        let mut p = q;
        for _ in 0..60 {
            let v = sinusoid(p);
            p = [q[0] - v[0], q[1] - v[1], q[2] - v[2]];
        }
        recovery_phantom(p)
    });
    let truth = DisplacementField::from_fn(dims, |x, y, z| sinusoid([x, y, z]));
    let cfg = RegistrationConfig { alpha: 0.003, smooth_sigma: 1.5, max_iters: 400, tol: 1e-6, ..Default::default() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t = Instant::now();
    let res = pool.install(|| register(&moving, &fixed, &cfg)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (jr, jt) = (compute_jsm(&res.field).unwrap(), compute_jsm(&truth).unwrap());
    let pts: Vec<_> = interior(dims, 2).collect();
    let mae = pts.iter().map(|&[x, y, z]| (jr.get(x, y, z) - jt.get(x, y, z)).abs()).sum::<f64>() / pts.len() as f64;
    let monotone = (0..cfg.levels).all(|l| {
        let c: Vec<f64> = res.history.iter().filter(|r| r.level == l).map(|r| r.cost).collect();
        c.windows(2).all(|w| w[1] <= w[0])
    });
    Outcome::new(
        mae < 0.05 && monotone && secs < 120.0,
        format!("JSM MAE {mae:.4} (< 0.05), monotone {monotone}, {} steps, {secs:.1}s single-threaded", res.history.len()),
    )
}

// ---------------------------------------------------------------- 4

/// Direct evaluation of the tent-Parzen histogram definition.
fn brute_force_mi(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let coords = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) * (bins - 1) as f64 } else { 0.0 }).collect()
    };
    let (ca, cb) = (coords(a), coords(b));
    let tent = |c: f64, k: usize| (1.0 - (c - k as f64).abs()).max(0.0);
    let mut joint = vec![vec![0.0; bins]; bins];
    for (x, y) in ca.iter().zip(&cb) {
        for (i, row) in joint.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell += tent(*x, i) * tent(*y, j) / a.len() as f64;
            }
        }
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..bins).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

fn mi_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // bin-centred intensities, so the histogram is the value distribution
    let bins = 16;
    let levels = Volume3D::from_fn([6, 6, 6], |_, _, _| rng.gen_range(0..bins) as f64);
    let levels = Volume3D::from_fn([6, 6, 6], |x, y, z| if (x, y, z) == (0, 0, 0) { 0.0 } else if (x, y, z) == (5, 5, 5) { 15.0 } else { levels.get(x, y, z) });
    let mut counts = BTreeMap::new();
    for v in levels.data() {
        *counts.entry(*v as i64).or_insert(0usize) += 1;
    }
    let n = levels.len() as f64;
    let entropy = -counts.values().map(|&c| c as f64 / n * (c as f64 / n).ln()).sum::<f64>();
    let self_err = (mattes_mi(&levels, &levels, bins).unwrap() - entropy).abs();

    let (mut min_mi, mut asym, mut oracle): (f64, f64, f64) = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..200 {
        let a = Volume3D::from_fn([4, 4, 4], |_, _, _| rng.gen_range(-1.0..1.0));
        let b = Volume3D::from_fn([4, 4, 4], |_, _, _| rng.gen_range(0.0..5.0));
        let bins = rng.gen_range(4..12);
        let ab = mattes_mi(&a, &b, bins).unwrap();
        let ba = mattes_mi(&b, &a, bins).unwrap();
        min_mi = min_mi.min(ab).min(ba);
        asym = asym.max((ab - ba).abs());
        oracle = oracle.max((ab - brute_force_mi(a.data(), b.data(), bins)).abs());
    }
    Outcome::new(
        self_err <= 1e-6 && min_mi >= -1e-9 && asym <= 1e-9 && oracle <= 1e-12,
        format!("|MI(X,X) - H(X)| {self_err:.1e}, min MI {min_mi:.1e}, asymmetry {asym:.1e}, oracle {oracle:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn tiny_samples(per_class: usize) -> Vec<FusionSample> {
    let spec = PhantomSpec { dims: [8, 8, 8], atrophy_radius: 1.2, blob_count: 2, seed: 3, ..Default::default() };
    let ds = generate_dataset(&spec, per_class, 0.25, true).unwrap();
    ds.part(Split::Train).iter().map(|s| s.to_sample()).collect()
}

/// Cross-entropy SGD written directly against `forward`, with the same
/// shuffling, seeding and batchnorm recalibration as `train`.
fn plain_ce(inputs: &[(Tensor, usize)], spec: &ModelSpec, cfg: &JalConfig, seed: u64) -> (ModelParams, TrainHistory) {
    let mut model = build_model(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = TrainHistory::default();
    let stack = |idx: &[usize]| Tensor::stack(&idx.iter().map(|&i| &inputs[i].0).collect::<Vec<_>>()).unwrap();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let y: Vec<usize> = chunk.iter().map(|&i| inputs[i].1).collect();
            let mut pass = forward(&model, &stack(chunk), Mode::Train, rng.gen()).unwrap();
            correct += pass.probs.iter().zip(&y).filter(|(p, &l)| p.argmax() == l).count();
            let ce = cross_entropy_graph(&mut pass.tape, pass.log_probs, &y);
            ce_sum += pass.tape.value(ce).item() * chunk.len() as f64;
            let grads = pass.tape.grad(ce, &pass.params).unwrap();
            for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                for (v, d) in p.data_mut().iter_mut().zip(pass.tape.value(*g).data()) {
                    *v -= cfg.learning_rate * d;
                }
            }
            model.update_running_stats(&pass.batch_stats);
        }
        let n = inputs.len() as f64;
        history.epochs.push(EpochRecord { epoch, ce: ce_sum / n, penalty: 0.0, total: ce_sum / n, accuracy: correct as f64 / n });
    }
    let idx: Vec<usize> = (0..inputs.len()).collect();
    model.recalibrate_batchnorm(&idx.chunks(cfg.batch_size).map(stack).collect::<Vec<_>>()).unwrap();
    (model, history)
}

fn jal_reduction() -> Outcome {
    let samples = tiny_samples(5);
    let model_cfg = ModelConfig { dropout: [0.3, 0.1], ..Default::default() };
    let mut same = Vec::new();
    for (mode, seed) in [(FusionMode::Early, 21u64), (FusionMode::Late, 22)] {
        let cfg = JalConfig { lambda: 0.0, epochs: 3, batch_size: 4, seed, ..Default::default() };
        let t = train(&samples, mode, &cfg, &model_cfg).unwrap();
        let spec = branch_spec(mode, 8, &model_cfg);
        for (b, (m, h)) in t.models.iter().zip(&t.histories).enumerate() {
            let inputs: Vec<(Tensor, usize)> =
                samples.iter().map(|s| (branch_input(s, mode, b).unwrap().0, s.label)).collect();
            let branch_seed = seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (pm, ph) = plain_ce(&inputs, &spec, &cfg, branch_seed);
            same.push(&pm == m && &ph == h);
        }
    }
    let n = same.iter().filter(|s| **s).count();
    Outcome::new(n == same.len(), format!("{n}/{} branches bit-identical (models and full histories)", same.len()))
}

// ---------------------------------------------------------------- 6

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Arm {
    macro_acc: f64,
    mass: f64,
}

fn confounder_suppression() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::load(&workspace_root().join("configs/benchmark.toml")).unwrap();
    let reps = 10u64;
    let modes = [FusionMode::Early, FusionMode::Late];
    let mut arms: BTreeMap<(usize, bool), Vec<Arm>> = BTreeMap::new();
    for rep in 0..reps {
        let phantom = PhantomSpec { seed: 1000 + rep, ..cfg.data.phantom.clone() };
        let ds = generate_dataset(&phantom, cfg.data.per_class, cfg.data.test_fraction, cfg.data.confounded).unwrap();
        let train_set: Vec<FusionSample> = ds.part(Split::Train).iter().map(|s| s.to_sample()).collect();
        let test_set: Vec<FusionSample> = ds.part(Split::Test).iter().map(|s| s.to_sample()).collect();
        for (mi, &mode) in modes.iter().enumerate() {
            let jal = JalConfig { seed: rep, ..cfg.jal.clone() };
            let report = ablate(&train_set, &test_set, &[mode], &jal, &cfg.model).unwrap();
            for with in [false, true] {
                let e = &report.arm(mode, with).unwrap().evaluation;
                arms.entry((mi, with)).or_default().push(Arm { macro_acc: e.metrics.macro_accuracy, mass: e.gradient_mass });
            }
            let (a, b) = (&arms[&(mi, false)][rep as usize], &arms[&(mi, true)][rep as usize]);
            eprintln!(
                "  rep {rep} {mode:?}: macro acc {:.4} -> {:.4}, gradient mass {:.3} -> {:.3} ({:.0?})",
                a.macro_acc,
                b.macro_acc,
                a.mass,
                b.mass,
                t.elapsed()
            );
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (mi, mode) in modes.iter().enumerate() {
        let (off, on) = (&arms[&(mi, false)], &arms[&(mi, true)]);
        let wins = off.iter().zip(on).filter(|(a, b)| b.macro_acc > a.macro_acc).count();
        let gain = on.iter().zip(off).map(|(b, a)| b.macro_acc - a.macro_acc).sum::<f64>() / reps as f64 * 100.0;
        let mean = |v: &[Arm]| v.iter().map(|a| a.mass).sum::<f64>() / v.len() as f64;
        let drop = (1.0 - mean(on) / mean(off)) * 100.0;
        pass &= wins >= 9 && gain >= 5.0 && drop >= 50.0;
        parts.push(format!("{mode:?}: wins {wins}/{reps}, mean gain {gain:+.1}pp, mass drop {drop:.0}%"));
    }
    let mins = t.elapsed().as_secs_f64() / 60.0;
    pass &= mins < 30.0;
    Outcome::new(
        pass,
        format!("lambda {}; {} (need >= 9/10, >= +5pp, >= 50%); {mins:.1} min", cfg.jal.lambda, parts.join("; ")),
    )
}

// ---------------------------------------------------------------- 7

fn adasyn() -> Outcome {
    let spec = PhantomSpec { dims: [8, 8, 8], atrophy_radius: 1.2, blob_count: 2, seed: 9, ..Default::default() };
    let template = make_template(&spec).unwrap();
    let build = |counts: [usize; 4]| {
        let mut out = Vec::new();
        for (class, &n) in counts.iter().enumerate() {
            for i in 0..n {
                out.push(make_subject(&template, class, &spec, (class * 1000 + i) as u64).unwrap());
            }
        }
        out
    };
    let k = 5;
    let train = build([30, 18, 12, 8]);
    let over = adasyn_oversample(&train, k, 1.0, 17).unwrap();
    let mut counts = [0usize; 4];
    over.subjects.iter().for_each(|s| counts[s.label] += 1);
    let balanced = counts.iter().all(|c| c.abs_diff(30) <= k);
    let synthetic = &over.provenance[train.len()..];
    let on_segment = over.subjects[train.len()..]
        .iter()
        .zip(synthetic)
        .filter(|(s, rec)| {
            let Some(r) = rec else { return false };
            let (a, b) = (&train[r.base], &train[r.neighbor]);
            let same_class = a.label == s.label && b.label == s.label && r.base != r.neighbor;
            let seg = |x: &[f64], p: &[f64], q: &[f64]| x.iter().zip(p).zip(q).all(|((x, p), q)| *x == p + r.u * (q - p));
            same_class
                && (0.0..=1.0).contains(&r.u)
                && (0..2).all(|m| {
                    seg(s.modalities[m].data(), a.modalities[m].data(), b.modalities[m].data())
                        && seg(s.jsms[m].values(), a.jsms[m].values(), b.jsms[m].values())
                })
        })
        .count();
    let originals_kept = over.subjects[..train.len()] == train[..] && over.provenance[..train.len()].iter().all(Option::is_none);
    let even = build([6, 6, 6, 6]);
    let unchanged = adasyn_oversample(&even, 3, 1.0, 1).unwrap().subjects == even;
    Outcome::new(
        balanced && on_segment == synthetic.len() && originals_kept && unchanged,
        format!(
            "counts {counts:?} vs majority 30 (k = {k}), {on_segment}/{} synthetics on recorded segments, balanced input unchanged {unchanged}",
            synthetic.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut valid = true;
    for _ in 0..500 {
        let mut dist = || {
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            PredictionDist::new(w.iter().map(|v| v / s).collect()).unwrap()
        };
        let (a, b) = (dist(), dist());
        let f = late_fusion_predict(&a, &b).unwrap();
        valid &= f.probs().iter().all(|p| (0.0..=1.0).contains(p)) && (f.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9;
        for k in 0..4 {
            worst = worst.max((f.probs()[k] - (a.probs()[k] + b.probs()[k]) / 2.0).abs());
        }
    }
    // a trained late-fusion pair against its own branch outputs
    let samples = tiny_samples(3);
    let cfg = JalConfig { lambda: 0.5, epochs: 1, batch_size: 4, ..Default::default() };
    let t = train(&samples, FusionMode::Late, &cfg, &ModelConfig::default()).unwrap();
    let fused = t.predict(&samples).unwrap();
    for (s, f) in samples.iter().zip(&fused) {
        let branch = |b: usize| {
            let x = s.x[b].clone().reshaped(&[1, 1, 8, 8, 8]);
            forward(&t.models[b], &x, Mode::Eval, 0).unwrap().probs.remove(0)
        };
        let (p0, p1) = (branch(0), branch(1));
        for k in 0..4 {
            worst = worst.max((f.probs()[k] - (p0.probs()[k] + p1.probs()[k]) / 2.0).abs());
        }
    }
    // same-padded 3^3 convolutions, 2x2x2 pooling with stride 2, twice; 8 channels
    let conv = |n: usize| (n + 2 - 3) + 1;
    let pool = |n: usize| (n - 2) / 2 + 1;
    let side = pool(conv(pool(conv(16))));
    let expect = 8 * side * side * side;
    let spec = branch_spec(FusionMode::Early, 16, &ModelConfig::default());
    let dense = spec.dense_inputs();
    let model = build_model(&spec, 0).unwrap();
    let runs = forward(&model, &Tensor::zeros(&[1, 2, 16, 16, 16]), Mode::Eval, 0).is_ok();
    Outcome::new(
        valid && worst <= 1e-9 && dense == vec![expect] && expect == 512 && runs,
        format!("late-fusion mean error {worst:.1e}, early-fusion dense input {dense:?} (expected {expect})"),
    )
}

// ---------------------------------------------------------------- 9

fn metrics() -> Outcome {
    let mut ok = true;
    // two-class matrix lifted into four classes; 20 samples
    let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 3, 7]).unwrap().lifted(4).unwrap();
    let r = per_class_metrics(&cm).unwrap();
    let c0 = &r.per_class[0];
    ok &= c0.sensitivity == Some(0.8) && c0.specificity == Some(0.7) && (c0.accuracy - 0.75).abs() < 1e-12;
    let c1 = &r.per_class[1];
    ok &= c1.sensitivity == Some(0.7) && c1.specificity == Some(0.8);

    // three classes, hand-counted
    let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 2, 6, 2, 0, 1, 3]).unwrap();
    let r = per_class_metrics(&cm).unwrap();
    let expect = [(5.0 / 6.0, 12.0 / 14.0), (6.0 / 10.0, 8.0 / 10.0), (3.0 / 4.0, 14.0 / 16.0)];
    for (m, (se, sp)) in r.per_class.iter().zip(expect) {
        ok &= (m.sensitivity.unwrap() - se).abs() < 1e-12 && (m.specificity.unwrap() - sp).abs() < 1e-12;
    }

    // macro scores are means of the per-class scores, and one-vs-rest
    // accuracy averaged over K classes is 1 - 2 (1 - accuracy) / K
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(8..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let preds: Vec<usize> = labels.iter().map(|&l| if rng.gen_bool(0.6) { l } else { rng.gen_range(0..4) }).collect();
        let r = per_class_metrics(&confusion(&preds, &labels, 4).unwrap()).unwrap();
        let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
        let mean = |f: &dyn Fn(&jsmkit::harness::ClassMetrics) -> Option<f64>| {
            let v: Vec<f64> = r.per_class.iter().filter_map(f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        worst = worst
            .max((r.macro_accuracy - (1.0 - 2.0 * (1.0 - acc) / 4.0)).abs())
            .max((r.macro_accuracy - mean(&|m| Some(m.accuracy))).abs())
            .max((r.macro_sensitivity - mean(&|m| m.sensitivity)).abs())
            .max((r.macro_specificity - mean(&|m| m.specificity)).abs());
    }
    Outcome::new(ok && worst < 1e-12, format!("hand-computed matrices match {ok}, macro relation error {worst:.1e}"))
}

// ---------------------------------------------------------------- 10

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL_CONFIG: &str = r#"
mode = "late"
[jal]
lambda = 0.5
epochs = 2
batch_size = 4
[data]
per_class = 4
[data.phantom]
dims = [8, 8, 8]
blob_count = 2
atrophy_radius = 1.2
[registration]
levels = 2
max_iters = 15
[ablation]
modes = ["late", "early"]
sweep = [0.1, 1.0]
"#;

fn run_cli(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_jsmkit"))
        .current_dir(cwd)
        .args(["--threads", "1", "--seed", "5", "--config", "small.toml"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_session(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    fs::write(dir.join("small.toml"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    run_cli(dir, &["gen-data", "--out", "data"])?;
    let mut ids: Vec<String> = fs::read_dir(dir.join("data"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    let (a, b) = (format!("data/{}/image_m0.jsmv", ids[0]), format!("data/{}/image_m0.jsmv", ids[1]));
    run_cli(dir, &["register", "--moving", &a, "--fixed", &b, "--out", "reg"])?;
    run_cli(dir, &["jsm", "--field", "reg/field.jsmv", "--out", "jsm"])?;
    run_cli(dir, &["train", "--data", "data", "--out", "model"])?;
    run_cli(dir, &["eval", "--data", "data", "--model", "model", "--out", "eval"])?;
    run_cli(dir, &["ablate", "--data", "data", "--out", "ablate"])?;
    run_cli(dir, &["ablate", "--sweep", "--data", "data", "--out", "sweep"])?;
    run_cli(dir, &["explain", "--data", "data", "--model", "model", "--out", "explain"])?;
    Ok(snapshot(dir))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let first = cli_session(&tmp.path().join("a"));
    let second = cli_session(&tmp.path().join("b"));
    match (first, second) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<_> = a
                .keys()
                .chain(b.keys())
                .filter(|k| a.get(*k) != b.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            Outcome::new(
                differing.is_empty() && a.len() > 20,
                format!("8 commands, {} files compared, differing: {differing:?}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, format!("command failed: {e}")),
    }
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "JSM analytic fields", jsm_analytic),
        (3, "registration recovery", registration_recovery),
        (4, "mutual information properties", mi_properties),
        (5, "JAL reduces to cross-entropy", jal_reduction),
        (6, "confounder suppression", confounder_suppression),
        (7, "ADASYN", adasyn),
        (8, "fusion", fusion),
        (9, "metrics", metrics),
        (10, "CLI determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // keep panics from individual criteria off the report lines
    std::panic::set_hook(Box::new(|info| eprintln!("  panic: {info}")));
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!outcome.pass);
        println!("criterion {n:>2} {name:<32} {status}  {} [{:.2}s]", outcome.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
