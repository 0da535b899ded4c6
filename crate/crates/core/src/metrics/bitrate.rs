//! Lossless-compression bitrate of masked pixels.
//!
//! Masked values are quantized to 8 bits over a fixed range, serialized
//! channel-major then row-major, and compressed with raw deflate at level 9.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::metrics::mask::Mask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRange {
    pub lo: f64,
    pub hi: f64,
}

pub const DEFAULT_QUANT_RANGE: QuantRange = QuantRange { lo: -4.0, hi: 4.0 };

impl QuantRange {
    pub fn quantize(&self, v: f64) -> u8 {
        let q = ((v - self.lo) / (self.hi - self.lo) * 255.0).round();
        q.clamp(0.0, 255.0) as u8
    }
}

pub fn compressed_len(bytes: &[u8]) -> usize {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory finish").len()
}

/// Compressed bits per masked value over [`DEFAULT_QUANT_RANGE`].
pub fn masked_bitrate(x: &Tensor, mask: &Mask) -> Result<f64> {
    masked_bitrate_with(x, mask, DEFAULT_QUANT_RANGE)
}

pub fn masked_bitrate_with(x: &Tensor, mask: &Mask, range: QuantRange) -> Result<f64> {
    if !(range.lo < range.hi) {
        return Err(Error::param(
            "range",
            "quantization range must be non-empty",
        ));
    }
    if mask.count() == 0 {
        return Err(Error::domain("mask selects no pixels"));
    }
    let bytes: Vec<u8> = mask
        .select(x)?
        .into_iter()
        .map(|v| range.quantize(v))
        .collect();
    Ok((8 * compressed_len(&bytes)) as f64 / bytes.len() as f64)
}
