//! Plain-surface masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PLAIN_TAU: f64 = 0.025;

/// Binary `(H, W)` mask. `true` marks a selected pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape {
                expected: vec![height, width],
                actual: vec![bits.len()],
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.bits[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, value: bool) {
        self.bits[h * self.width + w] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `{0, 1}`-valued `(1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("mask dims")
    }

    /// Check that the mask covers the spatial dims of `x`; returns `(C, H, W)`.
    pub fn check_covers(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = x.chw()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::Shape {
                expected: vec![self.height, self.width],
                actual: vec![h, w],
            });
        }
        Ok((c, h, w))
    }

    /// Values of `x` at selected pixels, every channel, channel-major then
    /// row-major.
    pub fn select(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (c, h, w) = self.check_covers(x)?;
        let plane = h * w;
        let mut out = Vec::with_capacity(c * self.count());
        for ch in 0..c {
            let base = ch * plane;
            out.extend(
                self.bits
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| **b)
                    .map(|(i, _)| x.data()[base + i]),
            );
        }
        Ok(out)
    }
}

/// Pixels whose local variation is below `tau` in every channel.
///
/// Per channel, `D_H` and `D_W` are absolute forward differences to the next
/// row and column, zero on the last row and column respectively; the pixel is
/// plain in that channel when `(D_W + D_H) / 2 < tau`. Channels are combined
/// with logical AND.
pub fn plain_mask(image: &Tensor, tau: f64) -> Result<Mask> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be > 0, got {tau}")));
    }
    let (c, h, w) = image.chw()?;
    let x = image.data();
    let mut mask = Mask::filled(h, w, true);
    for ch in 0..c {
        let at = |hh: usize, ww: usize| x[(ch * h + hh) * w + ww];
        for hh in 0..h {
            for ww in 0..w {
                let dh = if hh + 1 < h {
                    (at(hh + 1, ww) - at(hh, ww)).abs()
                } else {
                    0.0
                };
                let dw = if ww + 1 < w {
                    (at(hh, ww + 1) - at(hh, ww)).abs()
                } else {
                    0.0
                };
                if (dw + dh) / 2.0 >= tau {
                    mask.set(hh, ww, false);
                }
            }
        }
    }
    Ok(mask)
}
