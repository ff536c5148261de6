//! Interrupt training, save, resume, and land on the same weights as an
//! uninterrupted run.

use gabic::network::Checkpoint;
use gabic::trainer::{Dataset, TrainConfig, Trainer};

fn main() -> gabic::Result<()> {
    let data = Dataset::synthetic(32, 64, 4)?;
    let cfg = TrainConfig::toy(0.013);

    let mut straight = Trainer::<f32>::from_scratch(cfg.clone())?;
    for _ in 0..6 {
        straight.train_step(&data)?;
    }

    let mut first = Trainer::<f32>::from_scratch(cfg)?;
    for _ in 0..3 {
        first.train_step(&data)?;
    }
    let bytes = first.checkpoint().to_bytes();
    println!("checkpoint after 3 steps: {} bytes", bytes.len());
    let mut resumed = Trainer::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    for _ in 0..3 {
        resumed.train_step(&data)?;
    }

    let same = resumed.model().params().tensors() == straight.model().params().tensors();
    println!("resumed == uninterrupted after 6 steps: {same}");
    Ok(())
}
