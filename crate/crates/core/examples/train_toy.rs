//! Train the toy model on synthetic images and save a checkpoint.
//!
//! `cargo run --release --example train_toy -- [steps] [out.ckpt]`

use gabic::trainer::{validation_set, Dataset, RunOptions, TrainConfig, Trainer};

fn main() -> gabic::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(200, |s| s.parse().expect("steps"));
    let out = args.next().unwrap_or_else(|| "toy.ckpt".into());

    let mut cfg = TrainConfig::toy(0.025);
    cfg.epochs = steps.div_ceil(cfg.steps_per_epoch);
    let data = Dataset::synthetic(128, cfg.crop, 1)?;
    let val = validation_set().stack::<f32>()?;
    let mut trainer = Trainer::<f32>::from_scratch(cfg)?;
    let mut log = Vec::new();
    let report = trainer.run(&data, &val, RunOptions { checkpoint: Some(out.clone().into()), log: Some(&mut log) })?;

    for (i, v) in report.epochs.iter().enumerate().step_by(2) {
        println!("epoch {:>3}  loss {:>8.3}  bpp {:.4}  psnr {:.2} dB", i + 1, v.loss, v.bpp, v.psnr);
    }
    println!("best epoch {} saved to {out}", report.best_epoch);
    Ok(())
}
