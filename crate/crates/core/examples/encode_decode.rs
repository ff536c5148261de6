//! Compress an image to a bitstream and back.
//!
//! `cargo run --release --example encode_decode -- [model.ckpt] [image.ppm]`
//! Without arguments a model is trained briefly and a synthetic image used.

use gabic::codec::{Bitstream, Codec};
use gabic::evaluator::psnr;
use gabic::image::Image;
use gabic::network::Checkpoint;
use gabic::trainer::{synthetic_images, Dataset, TrainConfig, Trainer};

fn main() -> gabic::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) => Checkpoint::load(path)?.to_model::<f32>()?,
        None => {
            let data = Dataset::synthetic(64, 64, 1)?;
            let mut t = Trainer::<f32>::from_scratch(TrainConfig::toy(0.025))?;
            for _ in 0..100 {
                t.train_step(&data)?;
            }
            t.into_model()
        }
    };
    let img = match args.next() {
        Some(path) => Image::read(path)?,
        None => synthetic_images(1, 96, 5).remove(0).crop(0, 0, 90, 70)?,
    };

    let codec = Codec::new(model)?;
    let enc = codec.encode(&img, Some(2))?;
    let bytes = enc.bytes();
    let header = Bitstream::parse(&bytes)?;
    let dec = codec.decode_bytes(&bytes)?;
    assert!(dec == enc.reconstruction);

    println!("{}x{} -> {} bytes", img.width, img.height, bytes.len());
    println!("slices {}, lambda index {}", header.y_payloads.len(), header.lambda_index);
    println!("bpp {:.4} (model estimate {:.4})", enc.bpp(), enc.estimated_bpp());
    println!("psnr {:.2} dB", psnr(&img, &dec)?);
    Ok(())
}
