//! Masked summary statistics and the paired sign test.

use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::metrics::mask::Mask;
use crate::tensor::{pairwise_sum, Tensor};

/// Pairwise-summed arithmetic mean; `NaN` for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Population (divide by `n`) standard deviation, two-pass.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (pairwise_sum(&sq) / values.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedStats {
    pub mean_abs_err: f64,
    pub std: f64,
}

/// Mean `|x - ref|` and population std of `x` over the mask, broadcast across
/// channels.
pub fn masked_stats(x: &Tensor, reference: &Tensor, mask: &Mask) -> Result<MaskedStats> {
    x.ensure_same_shape(reference)?;
    if mask.count() == 0 {
        return Err(Error::domain("mask selects no pixels"));
    }
    let xs = mask.select(x)?;
    let rs = mask.select(reference)?;
    let abs: Vec<f64> = xs.iter().zip(&rs).map(|(a, b)| (a - b).abs()).collect();
    Ok(MaskedStats {
        mean_abs_err: mean(&abs),
        std: population_std(&xs),
    })
}

/// One-sided paired sign test of `a > b`; ties are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub positive: u64,
    pub negative: u64,
    /// `P(X >= positive)` for `X ~ Binomial(positive + negative, 1/2)`.
    pub p_value: f64,
}

pub fn paired_sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    let positive = a.iter().zip(b).filter(|(x, y)| x > y).count() as u64;
    let negative = a.iter().zip(b).filter(|(x, y)| x < y).count() as u64;
    let n = positive + negative;
    if n == 0 {
        return Err(Error::domain("sign test needs at least one untied pair"));
    }
    let p_value = if positive == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).map_err(|e| Error::domain(e.to_string()))?;
        dist.sf(positive - 1)
    };
    Ok(SignTest {
        positive,
        negative,
        p_value,
    })
}
