//! Train a small family of rate points and measure actual coded rate and
//! quality on held-out images. Prints the CSV table and curve.

use gabic::evaluator::{rd_sweep, RatePoint};
use gabic::trainer::{synthetic_images, Dataset, TrainConfig, Trainer, RATE_LAMBDAS};

fn main() -> gabic::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(60, |s| s.parse().expect("steps"));
    let data = Dataset::synthetic(64, 64, 1)?;
    let mut model = None;
    let mut points = Vec::new();
    // each rate point continues from the previous one
    for &lambda in &RATE_LAMBDAS {
        let cfg = TrainConfig::toy(lambda);
        let mut t = match model.take() {
            Some(m) => Trainer::<f32>::new(cfg, m)?,
            None => Trainer::from_scratch(cfg)?,
        };
        for _ in 0..steps {
            t.train_step(&data)?;
        }
        let m = t.into_model();
        points.push(RatePoint { lambda, model: m.clone() });
        model = Some(m);
    }

    let images: Vec<_> = synthetic_images(3, 128, 77)
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("img{i}"), img))
        .collect();
    let sweep = rd_sweep("toy", &points, &images)?;
    sweep.write_csv(std::io::stdout())?;
    for (p, l) in sweep.points.iter().zip(RATE_LAMBDAS) {
        println!("lambda {l}: mean {:.4} bpp  {:.2} dB", p.bpp, p.psnr);
    }
    Ok(())
}
