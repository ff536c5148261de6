#![allow(dead_code)]

use std::sync::OnceLock;

use gabic::network::Gabic;
use gabic::tensor::Rng;
use gabic::trainer::{Dataset, TrainConfig, Trainer};

/// Toy model after a short deterministic training run, shared by the tests
/// of one binary. Untrained weights leave latents far outside the predicted
/// scales, which is not what the codec is built for.
pub fn trained_toy() -> &'static Gabic<f32> {
    static MODEL: OnceLock<Gabic<f32>> = OnceLock::new();
    MODEL.get_or_init(|| train_toy(0.025, 100, 7))
}

pub fn train_toy(lambda: f64, steps: usize, seed: u64) -> Gabic<f32> {
    let data = Dataset::synthetic(64, 64, seed).unwrap();
    let mut cfg = TrainConfig::toy(lambda);
    cfg.seed = seed;
    let mut t = Trainer::<f32>::from_scratch(cfg).unwrap();
    for _ in 0..steps {
        t.train_step(&data).unwrap();
    }
    t.into_model()
}

/// Cubic through four points in Lagrange form, integrated with composite
/// Simpson on the raw PSNR axis.
pub fn quadrature_bd(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let lagrange = |pts: &[(f64, f64)], x: f64| {
        let mut sum = 0.0;
        for (i, &(ri, pi)) in pts.iter().enumerate() {
            let mut w = 1.0;
            for (j, &(_, pj)) in pts.iter().enumerate() {
                if i != j {
                    w *= (x - pj) / (pi - pj);
                }
            }
            sum += w * ri.log10();
        }
        sum
    };
    let min = |p: &[(f64, f64)]| p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
    let max = |p: &[(f64, f64)]| p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min(a).max(min(b)), max(a).min(max(b)));
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| lagrange(b, x) - lagrange(a, x);
    let mut s = f(lo) + f(hi);
    for k in 1..n {
        s += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    let avg = s * h / 3.0 / (hi - lo);
    100.0 * (10f64.powf(avg) - 1.0)
}

/// Four increasing (bpp, PSNR) points with realistic spacing.
pub fn random_rd_points(rng: &mut Rng) -> Vec<(f64, f64)> {
    let mut r = rng.uniform_range(0.05, 0.2);
    let mut p = rng.uniform_range(26.0, 29.0);
    (0..4)
        .map(|_| {
            r *= rng.uniform_range(1.5, 2.5);
            p += rng.uniform_range(1.5, 3.5);
            (r, p)
        })
        .collect()
}
