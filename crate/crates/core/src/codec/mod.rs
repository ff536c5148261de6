//! Image to bitstream and back, plus bit-allocation maps.

mod bitstream;
mod maps;
mod pipeline;

pub use bitstream::{Bitstream, MAGIC, NO_LAMBDA, VERSION};
pub use maps::{allocation_diff, BitMap, DiffMap};
pub use pipeline::{decode_image, encode_image, Codec, Encoded};
