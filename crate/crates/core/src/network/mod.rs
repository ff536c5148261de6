//! The codec network: analysis and synthesis transforms with attention
//! blocks, hyperprior, channel-slice entropy model and the RD objective.

mod checkpoint;
mod config;
mod entropy;
mod model;
mod params;

pub use checkpoint::{Checkpoint, Dtype};
pub use config::{ModelConfig, HYPER_STRIDE, LATENT_STRIDE, SIGMA_MIN};
pub use entropy::{factorized_bits, gaussian_bits, quantize, round_values, FactorizedPrior, QuantMode};
pub use model::{rd_loss, EntropyOut, ForwardOut, Gabic, RdTerms, DISTORTION_SCALE};
pub use params::{Bound, ParamId, ParamStore};
