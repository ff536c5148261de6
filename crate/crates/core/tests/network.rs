use gabic::network::{rd_loss, Checkpoint, Gabic, ModelConfig, QuantMode, DISTORTION_SCALE};
use gabic::prob;
use gabic::range_coder::{encode, ScaleTables, DEFAULT_PRECISION, DEFAULT_TAIL_MASS};
use gabic::tensor::{Graph, Rng, Tensor, Var};
use gabic::trainer::RATE_LAMBDAS;

fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[n, 3, h, w], 0.0, 1.0, &mut Rng::new(seed))
}

fn zero_params(m: &mut Gabic<f32>, pick: impl Fn(&str) -> bool) {
    let names: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| pick(n)) {
        let t = m.params_mut().by_name_mut(n).unwrap();
        t.data_mut().fill(0.0);
    }
}

#[test]
fn analysis_shape_and_determinism() {
    let m = Gabic::<f32>::new(ModelConfig::toy(), 3).unwrap();
    let run = |m: &Gabic<f32>| {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(image(1, 64, 64, 1));
        let y = m.analysis(&mut g, &p, x).unwrap();
        g.value(y).clone()
    };
    let y = run(&m);
    assert_eq!(y.shape(), &[1, 32, 4, 4]);
    let again = Gabic::<f32>::new(ModelConfig::toy(), 3).unwrap();
    assert_eq!(run(&again), y);
}

#[test]
fn zero_image_with_zero_last_stage_gives_zero_latent() {
    let mut m = Gabic::<f32>::new(ModelConfig::toy(), 4).unwrap();
    zero_params(&mut m, |n| n.starts_with("enc.conv4"));
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
    let y = m.analysis(&mut g, &p, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn synthesis_inverts_the_shape_law() {
    let m = Gabic::<f32>::new(ModelConfig::toy(), 5).unwrap();
    for h in [4, 8, 12] {
        for w in [4, 8] {
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let y = g.constant(Tensor::randn(&[1, 32, h, w], 1.0, &mut Rng::new(h as u64)));
            let x = m.synthesis(&mut g, &p, y).unwrap();
            assert_eq!(g.shape(x), &[1, 3, 16 * h, 16 * w]);
        }
    }
    for (h, w) in [(64, 64), (128, 64), (64, 192)] {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(image(1, h, w, 0));
        let y = m.analysis(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[1, 32, h / 16, w / 16]);
    }
}

#[test]
fn zero_decoder_weights_give_bias_image() {
    let mut m = Gabic::<f32>::new(ModelConfig::toy(), 6).unwrap();
    zero_params(&mut m, |n| n.starts_with("dec.") && !n.ends_with(".b"));
    let bias = m.params().by_name("dec.tconv1.b").unwrap().data().to_vec();
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let y = g.constant(Tensor::zeros(&[1, 32, 4, 4]));
    let x = m.synthesis(&mut g, &p, y).unwrap();
    for (c, plane) in g.value(x).data().chunks(64 * 64).enumerate() {
        assert!(plane.iter().all(|&v| v == bias[c]));
    }
}

#[test]
fn every_decoder_parameter_gets_gradient() {
    let m = Gabic::<f32>::new(ModelConfig::toy(), 7).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g, true);
    let x = g.constant(image(2, 64, 64, 2));
    let out = m.forward(&mut g, &p, x, QuantMode::Noise, 0.025, &mut Rng::new(1)).unwrap();
    g.backward(out.rd.loss).unwrap();
    let grads = m.params().grads(&g, &p);
    for ((name, _), grad) in m.params().iter().zip(&grads) {
        if name.starts_with("dec.") {
            let norm: f64 = grad.data().iter().map(|&v| (v as f64).powi(2)).sum();
            assert!(norm > 0.0, "{name} has zero gradient");
        }
    }
}

#[test]
fn round_mode_pipeline_is_repeatable() {
    let m = Gabic::<f32>::new(ModelConfig::toy(), 8).unwrap();
    let run = || {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(image(1, 64, 64, 3));
        let out = m.forward(&mut g, &p, x, QuantMode::Round, 0.025, &mut Rng::new(9)).unwrap();
        (g.value(out.entropy.y_hat).clone(), g.value(out.entropy.z_hat).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_slice_pipeline() {
    let cfg = ModelConfig {
        slices: 1,
        ..ModelConfig::toy()
    };
    let m = Gabic::<f32>::new(cfg, 9).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let x = g.constant(image(1, 64, 64, 4));
    let out = m.forward(&mut g, &p, x, QuantMode::Round, 0.025, &mut Rng::new(0)).unwrap();
    let e = &out.entropy;
    let sum: Vec<f32> = g.value(e.y_hat).data().iter().zip(g.value(e.residual).data()).map(|(a, b)| a + b).collect();
    assert_eq!(sum, g.value(e.y_bar).data());
    assert!(g.value(e.sigma).data().iter().all(|&s| s >= 0.04));
}

/// Slice loop in decoder order from `z_hat` and the latent; returns every
/// slice's `(mu, y_bar)`.
fn replay(m: &Gabic<f32>, z_hat: &Tensor<f32>, y: &Tensor<f32>) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let z = g.constant(z_hat.clone());
    let d = m.hyper_synthesis(&mut g, &p, z).unwrap();
    let mut prev: Vec<Var> = Vec::new();
    let mut out = Vec::new();
    for (i, (start, len)) in m.config().slice_ranges().into_iter().enumerate() {
        let (mu, _) = m.slice_params(&mut g, &p, i, d, &prev).unwrap();
        let yi = y.channels(start, len).unwrap();
        let mu_t = g.value(mu).clone();
        let y_hat = Tensor::from_fn(mu_t.shape(), |k| (yi.data()[k] - mu_t.data()[k]).round() + mu_t.data()[k]);
        let y_hat = g.constant(y_hat);
        let r = m.slice_residual(&mut g, &p, i, d, &prev, y_hat).unwrap();
        let y_bar = g.add(y_hat, r).unwrap();
        out.push((mu_t, g.value(y_bar).clone()));
        prev.push(y_bar);
    }
    out
}

#[test]
fn decoder_order_replay_and_causality() {
    let m = Gabic::<f32>::new(ModelConfig::toy(), 10).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let x = g.constant(image(1, 64, 64, 5));
    let out = m.forward(&mut g, &p, x, QuantMode::Round, 0.025, &mut Rng::new(0)).unwrap();
    let y = g.value(out.y).clone();
    let z_hat = g.value(out.entropy.z_hat).clone();

    // replay from (z_hat, y) reproduces the training-time pipeline
    let slices = replay(&m, &z_hat, &y);
    let ranges = m.config().slice_ranges();
    let y_bar = g.value(out.entropy.y_bar);
    let mu = g.value(out.entropy.mu);
    for (i, (start, len)) in ranges.iter().copied().enumerate() {
        assert_eq!(slices[i].0, mu.channels(start, len).unwrap());
        assert_eq!(slices[i].1, y_bar.channels(start, len).unwrap());
    }

    // perturbing the last slice of y leaves every earlier slice alone
    let (last_start, _) = ranges[ranges.len() - 1];
    let mut y2 = y.clone();
    let hw = 16;
    for v in &mut y2.data_mut()[last_start * hw..] {
        *v += 3.0;
    }
    let moved = replay(&m, &z_hat, &y2);
    let last = ranges.len() - 1;
    for i in 0..last {
        assert_eq!(moved[i], slices[i]);
    }
    assert_eq!(moved[last].0, slices[last].0);
    assert_ne!(moved[last].1, slices[last].1);

    // perturbing an earlier corrected slice moves the later means
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let z = g.constant(z_hat.clone());
    let d = m.hyper_synthesis(&mut g, &p, z).unwrap();
    let prev0 = g.constant(slices[0].1.clone());
    let (mu1, _) = m.slice_params(&mut g, &p, 1, d, &[prev0]).unwrap();
    let bumped = g.constant(slices[0].1.map(|v| v + 0.5));
    let (mu1b, _) = m.slice_params(&mut g, &p, 1, d, &[bumped]).unwrap();
    assert!(g.value(mu1).max_abs_diff(g.value(mu1b)) > 1e-6);
}

#[test]
fn rd_loss_laws() {
    let mut rng = Rng::new(11);
    let x = Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let xh = Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let ry = Tensor::<f64>::uniform(&[1, 4, 2, 2], 0.0, 3.0, &mut rng);
    let rz = Tensor::<f64>::uniform(&[1, 2, 1, 1], 0.0, 3.0, &mut rng);
    let eval = |target: &Tensor<f64>, lambda: f64| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(x.clone()), g.constant(target.clone()));
        let (ry, rz) = (g.constant(ry.clone()), g.constant(rz.clone()));
        let t = rd_loss(&mut g, a, b, ry, rz, lambda).unwrap();
        (g.value(t.loss).item(), g.value(t.bpp).item(), g.value(t.mse).item())
    };
    let bits = ry.sum() + rz.sum();
    let (loss, bpp, mse) = eval(&x, 0.025);
    assert_eq!(mse, 0.0);
    assert_eq!(loss, bpp);
    assert!((bpp - bits / 64.0).abs() < 1e-12);

    let (l1, b1, m1) = eval(&xh, 0.025);
    let (l2, _, _) = eval(&xh, 0.05);
    assert!(((l2 - b1) - 2.0 * (l1 - b1)).abs() < 1e-12 * l2);
    assert!(((l1 - b1) - 0.025 * DISTORTION_SCALE * m1).abs() < 1e-9);
    for lambda in RATE_LAMBDAS {
        assert!(eval(&xh, lambda).0.is_finite());
    }
}

#[test]
fn model_rate_matches_coded_length() {
    // random Gaussian latents, coded with the snapped-scale tables
    let tables = ScaleTables::new(DEFAULT_PRECISION, DEFAULT_TAIL_MASS).unwrap();
    let mut rng = Rng::new(12);
    for _ in 0..5 {
        let n = 20_000;
        let sigmas: Vec<f64> = (0..n).map(|_| (rng.uniform_range(0.1f64.ln(), 20f64.ln())).exp()).collect();
        let symbols: Vec<i32> = sigmas.iter().map(|&s| (rng.normal() * s).round() as i32).collect();
        let model: f64 = symbols.iter().zip(&sigmas).map(|(&k, &s)| prob::gaussian_bits(k as f64, s)).sum();
        let refs: Vec<_> = sigmas.iter().map(|&s| tables.for_sigma(s)).collect();
        let actual = 8.0 * encode(&symbols, &refs).unwrap().len() as f64;
        assert!((actual - model).abs() <= 0.02 * model + 64.0, "actual {actual} model {model}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let m = Gabic::<f32>::new(ModelConfig::toy(), 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gbck");
    Checkpoint::from_model(&m).save(&path).unwrap();
    let back: Gabic<f32> = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let run = |m: &Gabic<f32>| {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(image(1, 64, 64, 6));
        let out = m.forward(&mut g, &p, x, QuantMode::Round, 0.025, &mut Rng::new(0)).unwrap();
        g.value(out.x_hat).clone()
    };
    assert_eq!(run(&m), run(&back));
}
