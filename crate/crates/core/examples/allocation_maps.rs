//! Where do the bits go? Render per-pixel allocation for k-NN and dense
//! attention variants of one set of weights, and their difference.
//!
//! `cargo run --release --example allocation_maps -- [out_dir]`

use std::path::PathBuf;

use gabic::attention::AttentionMode;
use gabic::codec::{allocation_diff, Codec};
use gabic::network::Gabic;
use gabic::trainer::{synthetic_images, Dataset, TrainConfig, Trainer};

fn main() -> gabic::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    let data = Dataset::synthetic(64, 64, 1)?;
    let mut t = Trainer::<f32>::from_scratch(TrainConfig::toy(0.025))?;
    for _ in 0..80 {
        t.train_step(&data)?;
    }
    let knn = t.into_model();
    let dense = Gabic::from_params(knn.config().clone().with_attention(AttentionMode::Dense), knn.params().clone())?;

    let img = synthetic_images(1, 128, 12).remove(0);
    let a = Codec::new(knn)?.encode(&img, None)?.allocation_map();
    let b = Codec::new(dense)?.encode(&img, None)?.allocation_map();
    let diff = allocation_diff(&a, &b)?;

    img.write(dir.join("alloc_input.ppm"))?;
    a.to_image(None).write(dir.join("alloc_knn.pgm"))?;
    b.to_image(None).write(dir.join("alloc_dense.pgm"))?;
    diff.render().write(dir.join("alloc_diff.ppm"))?;
    println!("knn {:.1} bits, dense {:.1} bits, diff scale {:.4} bits/px", a.total(), b.total(), diff.scale());
    println!("maps written to {}", dir.display());
    Ok(())
}
