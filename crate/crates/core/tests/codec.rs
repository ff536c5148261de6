use gabic::attention::AttentionMode;
use gabic::codec::{allocation_diff, decode_image, Bitstream, Codec};
use gabic::image::Image;
use gabic::network::{Gabic, ModelConfig};
use gabic::tensor::Rng;
use gabic::trainer::synthetic_images;
use gabic::Error;

mod common;

fn codec() -> Codec {
    Codec::new(common::trained_toy().clone()).unwrap()
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    Image::new(w, h, 3, (0..w * h * 3).map(|_| rng.below(256) as u8).collect()).unwrap()
}

#[test]
fn decoder_matches_encoder_reconstruction() {
    let c = codec();
    let model = c.model().clone();
    for (i, (w, h)) in [(1, 1), (64, 64), (70, 33), (17, 130)].into_iter().enumerate() {
        let img = noise_image(w, h, i as u64);
        let enc = c.encode(&img, Some(2)).unwrap();
        assert_eq!((enc.reconstruction.width, enc.reconstruction.height), (w, h));
        let bytes = enc.bytes();
        // the decoder sees only the stream and the weights
        let dec = decode_image(&bytes, &model).unwrap();
        assert_eq!(dec, enc.reconstruction);
        assert_eq!(Bitstream::parse(&bytes).unwrap().lambda_index, 2);
        assert_eq!(enc.bpp(), 8.0 * bytes.len() as f64 / (w * h) as f64);
    }
}

#[test]
fn encoding_is_deterministic() {
    let c = codec();
    let img = &synthetic_images(1, 64, 5)[0];
    assert_eq!(c.encode(img, None).unwrap().bytes(), c.encode(img, None).unwrap().bytes());
}

#[test]
fn grey_input_is_coded_as_rgb() {
    let c = codec();
    let grey = Image::new(8, 8, 1, (0..64).map(|v| v as u8 * 3).collect()).unwrap();
    let enc = c.encode(&grey, None).unwrap();
    assert_eq!(enc.reconstruction.channels, 3);
    assert_eq!(c.decode_bytes(&enc.bytes()).unwrap(), enc.reconstruction);
}

#[test]
fn damaged_streams_fail() {
    let c = codec();
    let bytes = c.encode(&synthetic_images(3, 64, 9)[2], None).unwrap().bytes();
    for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
        assert!(c.decode_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut flips = 0;
    for pos in (0..bytes.len()).step_by(3) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x41;
        assert!(c.decode_bytes(&bad).is_err(), "flip at {pos}");
        flips += 1;
    }
    assert!(flips > 10);
}

#[test]
fn wrong_model_is_rejected() {
    let bytes = codec().encode(&noise_image(40, 40, 1), None).unwrap().bytes();
    let other_config = Gabic::new(ModelConfig::toy().with_attention(AttentionMode::Dense), 11).unwrap();
    assert!(matches!(
        decode_image(&bytes, &other_config),
        Err(Error::ConfigMismatch { .. })
    ));
    let other_weights = Gabic::new(ModelConfig::toy(), 12).unwrap();
    assert_eq!(other_weights.config().hash(), codec().model().config().hash());
    assert!(decode_image(&bytes, &other_weights).is_err());
}

#[test]
fn stream_size_tracks_model_estimate() {
    let c = codec();
    let s = c.model().config().slices;
    for (i, img) in synthetic_images(4, 64, 21).iter().enumerate() {
        let enc = c.encode(img, None).unwrap();
        let pixels = (img.width * img.height) as f64;
        let gap = (enc.payload_bpp() - enc.estimated_bpp()).abs();
        let allowed = 0.02 * enc.estimated_bpp() + 64.0 * (s + 1) as f64 / pixels;
        assert!(gap <= allowed, "image {i}: payload {} est {}", enc.payload_bpp(), enc.estimated_bpp());
    }
}

#[test]
fn allocation_maps() {
    let c = codec();
    let img = noise_image(100, 70, 3);
    let enc = c.encode(&img, None).unwrap();
    let map = enc.allocation_map();
    assert_eq!((map.width, map.height), (100, 70));
    assert!(map.bits.iter().all(|&b| b >= 0.0));
    assert!((map.total() - enc.estimated_bits).abs() <= 1e-3 * enc.estimated_bits);

    // flat content gets a flat allocation
    let flat = c.encode(&Image::filled(128, 128, 3, 90), None).unwrap().allocation_map();
    let mean = flat.mean();
    let var = flat.bits.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / flat.bits.len() as f64;
    assert!(var.sqrt() < 0.25 * mean, "std {} mean {mean}", var.sqrt());

    let self_diff = allocation_diff(&map, &map).unwrap();
    assert!(self_diff.values.iter().all(|&v| v == 0.0));
    assert!(self_diff.render().data.iter().all(|&v| v == 255));

    // same weights, dense attention
    let dense_model = Gabic::from_params(
        c.model().config().clone().with_attention(AttentionMode::Dense),
        c.model().params().clone(),
    )
    .unwrap();
    let dense = Codec::new(dense_model).unwrap().encode(&img, None).unwrap().allocation_map();
    let d = allocation_diff(&map, &dense).unwrap();
    let back = allocation_diff(&dense, &map).unwrap();
    assert!(d.values.iter().zip(&back.values).all(|(a, b)| *a == -*b));
    assert!(d.values.iter().map(|v| v.abs()).sum::<f64>() > 0.0);
}
