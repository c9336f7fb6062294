use jsmkit::diffnet::*;
use jsmkit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Small model touching every layer type.
fn small_spec(act: Activation) -> ModelSpec {
    ModelSpec {
        input: [2, 4, 4, 4],
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
            LayerSpec::Dense { inputs: 16, outputs: 3 },
        ],
    }
}

fn linear_spec(features: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input: [1, 1, 1, features],
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: features, outputs: classes }],
    }
}

fn set_params(model: &mut ModelParams, values: &[&[f64]]) {
    for (p, v) in model.params_mut().iter_mut().zip(values) {
        p.data_mut().copy_from_slice(v);
    }
}

#[test]
fn two_block_shapes() {
    let spec = ModelSpec::two_block(1, 16, Activation::Relu);
    assert_eq!(spec.dense_inputs(), vec![8 * 4 * 4 * 4]);
    assert_eq!(spec.dense_inputs(), vec![512]);
    assert_eq!(spec.validate().unwrap(), 4);
    let fused = ModelSpec::two_block(2, 16, Activation::default());
    assert_eq!(fused.validate().unwrap(), 4);
    assert_eq!(fused.dense_inputs(), vec![512]);
}

#[test]
fn same_seed_same_parameters() {
    let spec = ModelSpec::two_block(1, 16, Activation::default());
    let a = build_model(&spec, 42).unwrap();
    let b = build_model(&spec, 42).unwrap();
    let c = build_model(&spec, 43).unwrap();
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    assert_ne!(a.params()[0], c.params()[0]);
}

#[test]
fn initialization_scales() {
    let m = build_model(&ModelSpec::two_block(1, 16, Activation::Relu), 3).unwrap();
    // conv1 weights: fan-in 27, std sqrt(2/27)
    let w = m.params()[0].data();
    let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    assert!((var / (2.0 / 27.0) - 1.0).abs() < 0.6, "{var}");
    assert!(m.params()[1].data().iter().all(|&b| b == 0.0));
    assert!(m.params()[2].data().iter().all(|&g| g == 1.0));
    assert!(m.params()[3].data().iter().all(|&b| b == 0.0));
}

#[test]
fn mismatched_spec_names_layer_pair() {
    let mut spec = ModelSpec::two_block(1, 16, Activation::Relu);
    spec.layers[11] = LayerSpec::Dense { inputs: 500, outputs: 4 };
    let err = build_model(&spec, 0).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("layer 10 (flatten)") && msg.contains("layer 11 (dense)"), "{msg}");

    let mut spec = ModelSpec::two_block(1, 16, Activation::Relu);
    spec.layers[5] = LayerSpec::Conv3d { in_ch: 3, out_ch: 8, kernel: 3 };
    let msg = build_model(&spec, 0).unwrap_err().to_string();
    assert!(msg.contains("layer 4 (maxpool3d)") && msg.contains("layer 5 (conv3d)"), "{msg}");
}

#[test]
fn forward_outputs_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = build_model(&ModelSpec::two_block(1, 16, Activation::default()), 5).unwrap();
    let x = rand_tensor(&mut rng, &[3, 1, 16, 16, 16]);
    for mode in [Mode::Train, Mode::Eval] {
        let pass = forward(&model, &x, mode, 9).unwrap();
        assert_eq!(pass.probs.len(), 3);
        for p in &pass.probs {
            assert_eq!(p.len(), 4);
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let a = forward(&model, &x, Mode::Eval, 1).unwrap().probs;
    let b = forward(&model, &x, Mode::Eval, 2).unwrap().probs;
    assert_eq!(a, b);
}

#[test]
fn wrong_input_shape_is_input_error() {
    let model = build_model(&ModelSpec::two_block(1, 16, Activation::Relu), 5).unwrap();
    let x = Tensor::zeros(&[1, 1, 8, 16, 16]);
    assert!(matches!(forward(&model, &x, Mode::Eval, 0), Err(Error::Input(_))));
    assert!(matches!(input_gradient(&model, &x), Err(Error::Input(_))));
}

#[test]
fn zero_weights_give_uniform_prediction() {
    let mut model = build_model(&ModelSpec::two_block(1, 16, Activation::Relu), 5).unwrap();
    for p in model.params_mut() {
        if p.shape().len() > 1 {
            p.data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 1, 16, 16, 16]);
    let pass = forward(&model, &x, Mode::Eval, 0).unwrap();
    for p in &pass.probs {
        for &v in p.probs() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn cross_entropy_values() {
    let one = PredictionDist::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(cross_entropy(&one, 0), 0.0);
    let uniform = PredictionDist::new(vec![0.25; 4]).unwrap();
    assert!((cross_entropy(&uniform, 2) - 1.3862944).abs() < 1e-7);
    let p = PredictionDist::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
    assert!((cross_entropy(&p, 0) - 0.3566749).abs() < 1e-7);
    // floor at 1e-12
    assert!((cross_entropy(&one, 1) - 1e-12f64.ln().abs()).abs() < 1e-9);
    assert!(PredictionDist::new(vec![0.5, 0.6]).is_err());
}

#[test]
fn softmax_cross_entropy_logit_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let z = tape.leaf(rand_tensor(&mut rng, &[1, 4]));
    let ls = log_softmax(&mut tape, z);
    let ce = cross_entropy_graph(&mut tape, ls, &[2]);
    let g = tape.backward(ce).unwrap();
    let p: Vec<f64> = tape.value(ls).data().iter().map(|v| v.exp()).collect();
    for (k, (&gk, pk)) in g.get(z).unwrap().data().iter().zip(p).enumerate() {
        let y = if k == 2 { 1.0 } else { 0.0 };
        assert!((gk - (pk - y)).abs() < 1e-14);
    }
}

/// Central-difference check of every parameter gradient of a train-mode CE loss.
fn check_param_gradients(act: Activation, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = small_spec(act);
    let model = build_model(&spec, seed).unwrap();
    let x = rand_tensor(&mut rng, &[3, 2, 4, 4, 4]);
    let labels = [0usize, 2, 1];
    let loss = |m: &ModelParams, x: &Tensor| {
        let mut pass = forward(m, x, Mode::Train, 77).unwrap();
        let ce = cross_entropy_graph(&mut pass.tape, pass.log_probs, &labels);
        (pass, ce)
    };
    let (mut pass, ce) = loss(&model, &x);
    let mut wrt = pass.params.clone();
    wrt.push(pass.input);
    let grads = pass.tape.grad(ce, &wrt).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate().take(model.params().len()) {
        let analytic = pass.tape.value(*g).clone();
        for e in 0..analytic.len() {
            let mut mp = model.clone();
            mp.params_mut()[pi].data_mut()[e] += h;
            let mut mm = model.clone();
            mm.params_mut()[pi].data_mut()[e] -= h;
            let (tp, cp) = loss(&mp, &x);
            let (tm, cm) = loss(&mm, &x);
            let fd = (tp.tape.value(cp).item() - tm.tape.value(cm).item()) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], fd));
        }
    }
    let gx = pass.tape.value(*grads.last().unwrap()).clone();
    for e in (0..x.len()).step_by(7) {
        let mut xp = x.clone();
        xp.data_mut()[e] += h;
        let mut xm = x.clone();
        xm.data_mut()[e] -= h;
        let (tp, cp) = loss(&model, &xp);
        let (tm, cm) = loss(&model, &xm);
        let fd = (tp.tape.value(cp).item() - tm.tape.value(cm).item()) / (2.0 * h);
        worst = worst.max(rel_err(gx.data()[e], fd));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn parameter_gradients_match_finite_differences_softplus() {
    check_param_gradients(Activation::Softplus { beta: 10.0 }, 1);
}

#[test]
fn parameter_gradients_match_finite_differences_relu() {
    check_param_gradients(Activation::Relu, 2);
}

#[test]
fn untouched_parameters_get_zero_gradient() {
    // Logits never read the input leaf's neighbour; a second, unused leaf gets zeros.
    let model = build_model(&linear_spec(2, 2), 0).unwrap();
    let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.3, -0.2]).unwrap();
    let mut pass = forward(&model, &x, Mode::Eval, 0).unwrap();
    let unused = pass.tape.leaf(Tensor::full(&[3], 1.0));
    let ce = cross_entropy_graph(&mut pass.tape, pass.log_probs, &[1]);
    let g = pass.tape.backward(ce).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    assert!(g.get(pass.params[0]).unwrap().max_abs() > 0.0);
}

#[test]
fn input_gradient_zero_at_ignored_voxel() {
    let mut model = build_model(&linear_spec(3, 4), 1).unwrap();
    for k in 0..4 {
        model.params_mut()[0].data_mut()[k * 3 + 1] = 0.0;
    }
    let x = Tensor::new(vec![1, 1, 1, 1, 3], vec![0.5, 2.0, -1.0]).unwrap();
    let g = input_gradient(&model, &x).unwrap();
    assert_eq!(g.shape(), x.shape());
    assert_eq!(g.data()[1], 0.0);
    assert!(g.data()[0] != 0.0);
}

#[test]
fn input_gradient_hand_derived_linear_softmax() {
    // z = W x + b; sum_k log p_k = sum_k z_k - K lse(z)
    // d/dx = sum_k W_k (1 - K p_k)
    let mut model = build_model(&linear_spec(2, 2), 0).unwrap();
    let w = [0.5, -1.0, 2.0, 0.25];
    let b = [0.1, -0.3];
    set_params(&mut model, &[&w, &b]);
    let x = [0.7, -0.4];
    let z0 = w[0] * x[0] + w[1] * x[1] + b[0];
    let z1 = w[2] * x[0] + w[3] * x[1] + b[1];
    let p0 = 1.0 / (1.0 + (z1 - z0).exp());
    let p1 = 1.0 - p0;
    let want = [
        w[0] * (1.0 - 2.0 * p0) + w[2] * (1.0 - 2.0 * p1),
        w[1] * (1.0 - 2.0 * p0) + w[3] * (1.0 - 2.0 * p1),
    ];
    let g = input_gradient(&model, &Tensor::new(vec![1, 1, 1, 1, 2], x.to_vec()).unwrap()).unwrap();
    for i in 0..2 {
        assert!((g.data()[i] - want[i]).abs() < 1e-14, "{:?} vs {want:?}", g.data());
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = build_model(&small_spec(Activation::Softplus { beta: 10.0 }), 8).unwrap();
    // non-trivial running statistics
    model.update_running_stats(&[
        BatchStats { mean: vec![0.1, -0.2, 0.05], var: vec![0.8, 1.3, 0.6] },
        BatchStats { mean: vec![0.3, 0.0], var: vec![0.5, 2.0] },
    ]);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4, 4]);
    let g = input_gradient(&model, &x).unwrap();
    let f = |x: &Tensor| {
        let pass = forward(&model, x, Mode::Eval, 0).unwrap();
        pass.tape.value(pass.log_probs).data().iter().sum::<f64>()
    };
    let h = 1e-5;
    for e in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[e] += h;
        let mut xm = x.clone();
        xm.data_mut()[e] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        assert!(rel_err(g.data()[e], fd) < 1e-4, "entry {e}: {} vs {fd}", g.data()[e]);
    }
}

#[test]
fn zero_penalty_map_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = build_model(&small_spec(Activation::default()), 4).unwrap();
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4, 4]);
    let (v, grads) = penalty_param_gradient(&model, &x, &Tensor::zeros(x.shape())).unwrap();
    assert_eq!(v, 0.0);
    assert!(grads.iter().all(|g| g.max_abs() == 0.0));
}

#[test]
fn penalty_gradient_closed_form_linear_softmax() {
    // P = sum_i (q_i g_i)^2, g_i = sum_k W_ki (1 - K p_k)
    let mut model = build_model(&linear_spec(2, 2), 0).unwrap();
    let w = [0.5, -1.0, 2.0, 0.25];
    let b = [0.1, -0.3];
    set_params(&mut model, &[&w, &b]);
    let x = [0.7, -0.4];
    let q = [1.5 * 0.8, 1.0 * 0.2];
    let kk = 2.0;
    let z = [w[0] * x[0] + w[1] * x[1] + b[0], w[2] * x[0] + w[3] * x[1] + b[1]];
    let m = z[0].max(z[1]);
    let s = (z[0] - m).exp() + (z[1] - m).exp();
    let p = [(z[0] - m).exp() / s, (z[1] - m).exp() / s];
    let wk = |k: usize, i: usize| w[k * 2 + i];
    let g: Vec<f64> = (0..2).map(|i| (0..2).map(|k| wk(k, i) * (1.0 - kk * p[k])).sum()).collect();
    let pen: f64 = (0..2).map(|i| (q[i] * g[i]).powi(2)).sum();
    // dp_j/dz_k = p_j (delta_jk - p_k)
    let dp = |j: usize, k: usize| p[j] * (if j == k { 1.0 } else { 0.0 } - p[k]);
    let mut dw = [0.0; 4];
    let mut db = [0.0; 2];
    for k in 0..2 {
        for i in 0..2 {
            let mut acc = 0.0;
            for ip in 0..2 {
                let mut dg = if ip == i { 1.0 - kk * p[k] } else { 0.0 };
                for j in 0..2 {
                    dg -= kk * wk(j, ip) * dp(j, k) * x[i];
                }
                acc += 2.0 * q[ip] * q[ip] * g[ip] * dg;
            }
            dw[k * 2 + i] = acc;
        }
        let mut acc = 0.0;
        for ip in 0..2 {
            let dg: f64 = -(0..2).map(|j| kk * wk(j, ip) * dp(j, k)).sum::<f64>();
            acc += 2.0 * q[ip] * q[ip] * g[ip] * dg;
        }
        db[k] = acc;
    }
    let xt = Tensor::new(vec![1, 1, 1, 1, 2], x.to_vec()).unwrap();
    let qt = Tensor::new(vec![1, 1, 1, 1, 2], q.to_vec()).unwrap();
    let (v, grads) = penalty_param_gradient(&model, &xt, &qt).unwrap();
    assert!((v - pen).abs() < 1e-14);
    for e in 0..4 {
        assert!((grads[0].data()[e] - dw[e]).abs() < 1e-13, "{:?} vs {dw:?}", grads[0].data());
    }
    for e in 0..2 {
        assert!((grads[1].data()[e] - db[e]).abs() < 1e-13, "{:?} vs {db:?}", grads[1].data());
    }
}

#[test]
fn penalty_gradient_matches_finite_differences_softplus() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = build_model(&small_spec(Activation::Softplus { beta: 10.0 }), 12).unwrap();
    model.update_running_stats(&[
        BatchStats { mean: vec![0.1, -0.2, 0.05], var: vec![0.8, 1.3, 0.6] },
        BatchStats { mean: vec![0.3, 0.0], var: vec![0.5, 2.0] },
    ]);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4, 4]);
    let q = Tensor::new(x.shape().to_vec(), (0..x.len()).map(|_| rng.gen_range(0.0..1.5)).collect()).unwrap();
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
            worst = worst.max(rel_err(g.data()[e], (fp - fm) / (2.0 * h)));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn dropout_preserves_expectation() {
    let spec = ModelSpec {
        input: [1, 2, 2, 2],
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Dense { inputs: 8, outputs: 2 },
        ],
    };
    let model = build_model(&spec, 3).unwrap();
    let x = Tensor::new(vec![1, 1, 2, 2, 2], (1..=8).map(|v| v as f64 / 8.0).collect()).unwrap();
    let eval = forward(&model, &x, Mode::Eval, 0).unwrap();
    let want = eval.tape.value(eval.logits).data().to_vec();
    let n = 4000;
    let mut mean = vec![0.0; 2];
    for s in 0..n {
        let pass = forward(&model, &x, Mode::Train, s).unwrap();
        for (m, v) in mean.iter_mut().zip(pass.tape.value(pass.logits).data()) {
            *m += v / n as f64;
        }
    }
    for (m, w) in mean.iter().zip(&want) {
        assert!((m - w).abs() < 0.05, "{mean:?} vs {want:?}");
    }
}

#[test]
fn forward_backward_penalty_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = build_model(&small_spec(Activation::default()), 21).unwrap();
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4, 4]);
    let q = rand_tensor(&mut rng, &[2, 2, 4, 4, 4]);
    let run = || {
        let mut pass = forward(&model, &x, Mode::Train, 5).unwrap();
        let ce = cross_entropy_graph(&mut pass.tape, pass.log_probs, &[1, 0]);
        let g = pass.tape.backward(ce).unwrap();
        let pg = penalty_param_gradient(&model, &x, &q).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (
            pass.probs.clone(),
            pass.params.iter().map(|p| bits(g.get(*p).unwrap())).collect::<Vec<_>>(),
            pg.0.to_bits(),
            pg.1.iter().map(bits).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-500.0f64..500.0, 4)) {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 4], logits).unwrap());
        let ls = log_softmax(&mut tape, z);
        let s: f64 = tape.value(ls).data().iter().map(|v| v.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_is_a_maximum(p in prop::collection::vec(0.0f64..1.0, 4)) {
        let s: f64 = p.iter().sum::<f64>().max(1e-9);
        let d = PredictionDist::new(p.iter().map(|v| v / s).collect());
        if let Ok(d) = d {
            let a = d.argmax();
            prop_assert!(d.probs().iter().all(|&v| v <= d.probs()[a]));
        }
    }
}
