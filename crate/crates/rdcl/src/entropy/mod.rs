//! Probability models over quantized symbols, CDF tables and the range coder.

mod bitstream;
pub(crate) mod cdf;
mod coder;
mod factorized;
mod gaussian;

pub use bitstream::{Bitstream, Header, HEADER_LEN, MAGIC, VERSION};
pub use cdf::{
    build_cdf, bypass_table, CdfTable, GaussianTables, SigmaGrid, BYPASS_MAX,
    DEFAULT_PRECISION, DEFAULT_TAIL_MASS, MIN_HALF_SUPPORT,
};
pub use coder::{decode_symbols, encode_symbols, RangeDecoder, RangeEncoder};
pub use factorized::{factorized_bits, factorized_cdf, FactorizedDensity, ZDensity};
pub use gaussian::{
    estimate_rate_bits, gaussian_bin_prob, gaussian_bits_op, gaussian_symbol_bits,
    LIKELIHOOD_FLOOR, SIGMA_MIN,
};

use ndarray::ArrayD;
use thiserror::Error;

/// Per-element conditional Gaussian parameters predicted by a context model.
#[derive(Debug, Clone)]
pub struct EntropyParams {
    pub mu: ArrayD<f32>,
    pub sigma: ArrayD<f32>,
}

impl EntropyParams {
    pub fn new(mu: ArrayD<f32>, sigma: ArrayD<f32>) -> Result<Self, EntropyError> {
        if mu.shape() != sigma.shape() {
            return Err(EntropyError::ShapeMismatch {
                left: mu.shape().to_vec(),
                right: sigma.shape().to_vec(),
            });
        }
        Ok(EntropyParams { mu, sigma })
    }
}

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("symbol {symbol} outside codable range [{lo}, {hi}]")]
    SymbolOutOfRange { symbol: i32, lo: i32, hi: i32 },
    #[error("bitstream truncated at byte {pos}")]
    Truncated { pos: usize },
    #[error("bad magic bytes (not an RDCL stream)")]
    BadMagic,
    #[error("unsupported bitstream version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("model id mismatch: stream has {stream:#04x}, model is {model:#04x}")]
    ModelIdMismatch { stream: u8, model: u8 },
    #[error("missing segment for coding unit {unit} ({expected} expected, {found} present)")]
    MissingSegment { unit: usize, expected: usize, found: usize },
    #[error("invalid header field: {0}")]
    InvalidHeader(String),
}
