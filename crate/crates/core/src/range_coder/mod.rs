//! Static-model range coding of integer symbols with escape to raw values.

mod coder;
mod table;

pub use coder::{decode, encode, ideal_bits, Decoder, Encoder};
pub use table::{
    build_gaussian_cdf, build_logistic_cdf, CdfTable, ScaleTables, BYPASS_BITS, DEFAULT_PRECISION,
    DEFAULT_TAIL_MASS, SCALE_LEVELS, SCALE_MAX,
};
