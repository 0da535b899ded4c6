//! Within-patch Pearson correlation.
//!
//! A tensor is tiled into non-overlapping `C x p x p` patches. Each of the
//! `C p^2` within-patch positions is a variable and each patch is one
//! observation; the statistic is the mean of the `k` largest absolute
//! pairwise correlations between positions.

use crate::error::{Error, Result};
use crate::tensor::{dot, pairwise_sum, Tensor};

pub const DEFAULT_PATCH: usize = 8;
pub const DEFAULT_TOP_K: usize = 20;

/// Pearson coefficient of two equal-length series; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(Error::domain("correlation needs at least two observations"));
    }
    let ca = centered(a);
    let cb = centered(b);
    Ok(coefficient(&ca, &cb, dot(&ca, &ca), dot(&cb, &cb)))
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = pairwise_sum(v) / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn coefficient(a: &[f64], b: &[f64], ss_a: f64, ss_b: f64) -> f64 {
    if ss_a == 0.0 || ss_b == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (ss_a.sqrt() * ss_b.sqrt())).clamp(-1.0, 1.0)
}

/// Appends every patch of `x` as a row of `C p^2` values to `columns`, which
/// holds one series per position.
fn collect_patches(x: &Tensor, patch: usize, columns: &mut [Vec<f64>]) -> Result<usize> {
    let (c, h, w) = x.chw()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape {
            expected: vec![c, h - h % patch.max(1), w - w % patch.max(1)],
            actual: vec![c, h, w],
        });
    }
    let data = x.data();
    let mut count = 0;
    for ph in (0..h).step_by(patch) {
        for pw in (0..w).step_by(patch) {
            let mut pos = 0;
            for ch in 0..c {
                for dh in 0..patch {
                    let row = (ch * h + ph + dh) * w + pw;
                    for dw in 0..patch {
                        columns[pos].push(data[row + dw]);
                        pos += 1;
                    }
                }
            }
            count += 1;
        }
    }
    Ok(count)
}

fn top_k_mean(columns: Vec<Vec<f64>>, k: usize) -> Result<f64> {
    let d = columns.len();
    let pairs = d * (d - 1) / 2;
    if k == 0 || k > pairs {
        return Err(Error::param(
            "k",
            format!("must lie in 1..={pairs} for {d} positions, got {k}"),
        ));
    }
    let centered: Vec<Vec<f64>> = columns.iter().map(|c| centered(c)).collect();
    let ss: Vec<f64> = centered.iter().map(|c| dot(c, c)).collect();
    let mut coeffs = Vec::with_capacity(pairs);
    for i in 0..d {
        for j in i + 1..d {
            coeffs.push(coefficient(&centered[i], &centered[j], ss[i], ss[j]).abs());
        }
    }
    coeffs.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(pairwise_sum(&coeffs[..k]) / k as f64)
}

fn check_observations(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::domain(format!(
            "need at least 2 patches as observations, got {n}"
        )));
    }
    Ok(())
}

/// Canonical per-tensor statistic: the patches of `x` are the observations.
pub fn patch_corr_topk(x: &Tensor, patch: usize, k: usize) -> Result<f64> {
    let (c, _, _) = x.chw()?;
    let mut columns = vec![Vec::new(); c * patch * patch];
    let n = collect_patches(x, patch, &mut columns)?;
    check_observations(n)?;
    top_k_mean(columns, k)
}

/// [`patch_corr_topk`] with 8x8 patches and the top 20 coefficients.
pub fn patch_corr_top20(x: &Tensor) -> Result<f64> {
    patch_corr_topk(x, DEFAULT_PATCH, DEFAULT_TOP_K)
}

/// Batch-axis variant: the patches of every tensor in `xs` are pooled as
/// observations, so correlations reflect structure shared across samples.
pub fn patch_corr_top20_batch(xs: &[Tensor], patch: usize, k: usize) -> Result<f64> {
    let first = xs
        .first()
        .ok_or_else(|| Error::domain("batch correlation needs at least one tensor"))?;
    let (c, _, _) = first.chw()?;
    let mut columns = vec![Vec::new(); c * patch * patch];
    let mut n = 0;
    for x in xs {
        first.ensure_same_shape(x)?;
        n += collect_patches(x, patch, &mut columns)?;
    }
    check_observations(n)?;
    top_k_mean(columns, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn constant_patches_are_fully_correlated() {
        let (h, w) = (16, 16);
        let data = (0..h * w)
            .map(|i| ((i / w) / 8 * 2 + (i % w) / 8) as f64)
            .collect();
        let x = Tensor::new(vec![1, h, w], data).unwrap();
        assert!((patch_corr_top20(&x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_is_weakly_correlated() {
        let x = Tensor::randn(&[1, 64, 64], &mut stream(1, Purpose::InitialNoise, 0));
        let v = patch_corr_top20(&x).unwrap();
        assert!(v > 0.0 && v < 0.6, "{v}");
    }

    #[test]
    fn planted_duplicate_position_reaches_one() {
        let mut x = Tensor::randn(&[1, 64, 64], &mut stream(2, Purpose::InitialNoise, 0));
        let baseline = patch_corr_top20(&x).unwrap();
        let w = 64;
        let data = x.data_mut();
        for ph in (0..64).step_by(8) {
            for pw in (0..64).step_by(8) {
                // Position (0, 1) copies position (0, 0) in every patch.
                data[ph * w + pw + 1] = data[ph * w + pw];
            }
        }
        let planted = patch_corr_top20(&x).unwrap();
        assert!(planted > baseline);
        let top1 = patch_corr_topk(&x, 8, 1).unwrap();
        assert!((top1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_positions_contribute_zero() {
        let x = Tensor::zeros(&[1, 16, 16]);
        assert_eq!(patch_corr_top20(&x).unwrap(), 0.0);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn shape_and_count_errors() {
        assert!(matches!(
            patch_corr_top20(&Tensor::zeros(&[1, 12, 16])),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            patch_corr_top20(&Tensor::zeros(&[1, 8, 8])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn batch_of_one_matches_per_tensor() {
        let x = Tensor::randn(&[2, 16, 16], &mut stream(3, Purpose::InitialNoise, 0));
        let a = patch_corr_topk(&x, 8, 20).unwrap();
        let b = patch_corr_top20_batch(std::slice::from_ref(&x), 8, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pearson_of_affine_pair_is_signed_one() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let b: Vec<f64> = a.iter().map(|v| -3.0 * v + 1.0).collect();
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-12);
    }
}
