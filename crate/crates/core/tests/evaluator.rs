use gabic::evaluator::{avg_log_rate_diff, bd_rate, compare_modes, psnr, rd_sweep, RatePoint, RdCurve, RdPoint, SweepRow};
use gabic::image::Image;
use gabic::tensor::Rng;
use gabic::trainer::{synthetic_images, Dataset, TrainConfig, Trainer};

mod common;

fn curve(pts: &[(f64, f64)]) -> RdCurve {
    RdCurve::new("t", pts.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect()).unwrap()
}

#[test]
fn halved_rate_is_minus_fifty_percent() {
    let a = [(0.12, 27.1), (0.25, 29.8), (0.5, 32.6), (1.0, 35.2)];
    let half: Vec<(f64, f64)> = a.iter().map(|&(r, p)| (r / 2.0, p)).collect();
    let bd = bd_rate(&curve(&a), &curve(&half)).unwrap();
    assert!((bd + 50.0).abs() < 1e-6, "{bd}");
}

#[test]
fn random_fixtures_match_quadrature() {
    let mut rng = Rng::new(99);
    for _ in 0..20 {
        let (a, b) = (common::random_rd_points(&mut rng), common::random_rd_points(&mut rng));
        let got = bd_rate(&curve(&a), &curve(&b)).unwrap();
        let want = common::quadrature_bd(&a, &b);
        assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn bd_identity_and_antisymmetry() {
    let a = curve(&[(0.1, 28.0), (0.2, 30.1), (0.4, 32.9), (0.8, 35.5)]);
    let b = curve(&[(0.11, 27.5), (0.19, 29.9), (0.42, 33.4), (0.75, 35.0)]);
    assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
    let d = avg_log_rate_diff(&a, &b).unwrap() + avg_log_rate_diff(&b, &a).unwrap();
    assert!(d.abs() < 1e-12);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let base = &synthetic_images(1, 64, 1)[0];
    let mut last = f64::INFINITY;
    for amp in [1, 2, 4, 8, 16, 32, 64] {
        let mut rng = Rng::new(amp);
        let data = base
            .data
            .iter()
            .map(|&v| {
                let d = if rng.uniform() < 0.5 { -(amp as i32) } else { amp as i32 };
                (v as i32 + d).clamp(0, 255) as u8
            })
            .collect();
        let noisy = Image::new(base.width, base.height, 3, data).unwrap();
        let p = psnr(base, &noisy).unwrap();
        assert!(p < last, "amp {amp}: {p} !< {last}");
        last = p;
    }
}

/// Four distinct models: the shared fixture nudged a few steps at each lambda.
fn rate_points() -> Vec<RatePoint> {
    let data = Dataset::synthetic(16, 64, 8).unwrap();
    gabic::trainer::RATE_LAMBDAS
        .iter()
        .map(|&lambda| {
            let mut t = Trainer::new(TrainConfig::toy(lambda), common::trained_toy().clone()).unwrap();
            for _ in 0..3 {
                t.train_step(&data).unwrap();
            }
            RatePoint {
                lambda,
                model: t.into_model(),
            }
        })
        .collect()
}

#[test]
fn sweep_and_self_comparison() {
    let points = rate_points();
    let images: Vec<(String, Image)> = synthetic_images(2, 64, 40)
        .into_iter()
        .enumerate()
        .map(|(i, im)| (format!("img{i}"), im))
        .collect();
    let sweep = rd_sweep("toy", &points, &images).unwrap();
    assert_eq!(sweep.rows.len(), images.len() * points.len());
    assert_eq!(sweep.curve().unwrap().points.len(), 4);
    let slices = points[0].model.config().slices;
    for r in &sweep.rows {
        assert!(r.enc_ms > 0.0 && r.dec_ms > 0.0);
        // container header plus one range-coder flush per stream
        let overhead = (8 * (35 + 4 * slices) + 64 * (slices + 1)) as f64 / 4096.0;
        assert!((r.bpp - r.bpp_est).abs() <= 0.02 * r.bpp_est + overhead, "{r:?}");
    }
    let mut csv = Vec::new();
    sweep.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), SweepRow::CSV_HEADER);
    assert_eq!(text.lines().count(), 1 + images.len() * points.len());

    let same = compare_modes(&points, &points, &images).unwrap();
    assert_eq!(same.bd_rate, Some(0.0));
    assert_eq!(same.diffs.len(), images.len() * points.len());
    for (_, _, d) in &same.diffs {
        assert!(d.render().data.iter().all(|&v| v == 255));
    }
}
