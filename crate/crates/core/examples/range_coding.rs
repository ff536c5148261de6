//! Entropy-code Gaussian-distributed integers with the quantized scale tables
//! and compare the stream length to the ideal code length.

use gabic::range_coder::{self, ScaleTables, DEFAULT_PRECISION, DEFAULT_TAIL_MASS};
use gabic::tensor::Rng;

fn main() -> gabic::Result<()> {
    let tables = ScaleTables::new(DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?;
    let mut rng = Rng::new(42);
    let sigmas: Vec<f64> = (0..50_000).map(|_| rng.uniform_range(0.1, 12.0)).collect();
    let symbols: Vec<i32> = sigmas.iter().map(|s| (rng.normal() * s).round() as i32).collect();
    let refs: Vec<_> = sigmas.iter().map(|&s| tables.for_sigma(s)).collect();

    let bytes = range_coder::encode(&symbols, &refs)?;
    let decoded = range_coder::decode(&bytes, &refs, symbols.len())?;
    assert_eq!(decoded, symbols);

    let ideal = range_coder::ideal_bits(&symbols, &refs);
    println!("{} symbols over {} scale levels", symbols.len(), tables.levels().len());
    println!("ideal {:.0} bits, coded {} bits ({:+.3}%)", ideal, 8 * bytes.len(), 100.0 * (8.0 * bytes.len() as f64 / ideal - 1.0));
    Ok(())
}
