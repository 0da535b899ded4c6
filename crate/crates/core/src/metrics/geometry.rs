//! Interpolation paths, distance maps, and noise/image/latent triangles.

use crate::dynamics::{Direction, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SLERP_LINEAR_BELOW: f64 = 1e-6;
const COINCIDENT_DISTANCE: f64 = 1e-9;

/// Angle between two nonzero vectors, stable near 0 and pi.
fn angle_between(u: &[f64], v: &[f64]) -> f64 {
    let nu = crate::tensor::dot(u, u).sqrt();
    let nv = crate::tensor::dot(v, v).sqrt();
    let (mut diff, mut sum) = (Vec::with_capacity(u.len()), Vec::with_capacity(u.len()));
    for (a, b) in u.iter().zip(v) {
        diff.push(a / nu - b / nv);
        sum.push(a / nu + b / nv);
    }
    let d = crate::tensor::dot(&diff, &diff).sqrt();
    let s = crate::tensor::dot(&sum, &sum).sqrt();
    2.0 * d.atan2(s)
}

/// Spherical interpolation between `x` (`lambda = 0`) and `y` (`lambda = 1`).
pub fn slerp(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    x.ensure_same_shape(y)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(
            "lambda",
            format!("must lie in [0, 1], got {lambda}"),
        ));
    }
    if x.norm() == 0.0 || y.norm() == 0.0 {
        return Err(Error::domain("slerp endpoints must be nonzero"));
    }
    let theta = angle_between(x.data(), y.data());
    if theta < SLERP_LINEAR_BELOW {
        return x.lincomb(1.0 - lambda, y, lambda);
    }
    let s = theta.sin();
    x.lincomb(
        ((1.0 - lambda) * theta).sin() / s,
        y,
        (lambda * theta).sin() / s,
    )
}

/// Distances from sampling states to points on the segment `x_T -> latent`.
///
/// `values[k][j] = |(1 - lambdas[j]) x_T + lambdas[j] latent - states[k]|`;
/// row `k` is trajectory boundary `k` (row 0 is the clean image, row `T` is
/// `x_T`).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub lambdas: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl DistanceMap {
    /// Lambda of the closest path point for each row; ties go to the smaller
    /// lambda.
    pub fn argmin_lambdas(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v < row[best] {
                        best = j;
                    }
                }
                self.lambdas[best]
            })
            .collect()
    }
}

pub fn path_distance_map(
    traj: &Trajectory,
    latent: &Tensor,
    lambdas: &[f64],
) -> Result<DistanceMap> {
    if traj.direction != Direction::Sampling {
        return Err(Error::Precondition(
            "distance maps are defined on sampling trajectories".into(),
        ));
    }
    traj.check_complete()?;
    let x_t = traj.noisy();
    x_t.ensure_same_shape(latent)?;
    let points = lambdas
        .iter()
        .map(|&l| x_t.lincomb(1.0 - l, latent, l))
        .collect::<Result<Vec<_>>>()?;
    let values = traj
        .states
        .iter()
        .map(|s| {
            points
                .iter()
                .map(|p| p.sub(s).map(|d| d.norm()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistanceMap {
        lambdas: lambdas.to_vec(),
        values,
    })
}

/// Vertex angles in degrees of the triangle (noise `x_T`, image `x_0`,
/// latent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleAngles {
    pub angle_x0: f64,
    pub angle_xt: f64,
    pub angle_latent: f64,
}

impl TriangleAngles {
    pub fn sum(&self) -> f64 {
        self.angle_x0 + self.angle_xt + self.angle_latent
    }

    /// One angle within `tol` degrees of 180: the points are nearly collinear.
    pub fn is_near_collinear(&self, tol: f64) -> bool {
        [self.angle_x0, self.angle_xt, self.angle_latent]
            .iter()
            .any(|a| *a >= 180.0 - tol)
    }
}

pub fn triangle_angles(noise: &Tensor, image: &Tensor, latent: &Tensor) -> Result<TriangleAngles> {
    noise.ensure_same_shape(image)?;
    noise.ensure_same_shape(latent)?;
    let edge = |from: &Tensor, to: &Tensor| to.sub(from).map(Tensor::into_data);
    let pairs = [(noise, image), (noise, latent), (image, latent)];
    for (a, b) in pairs {
        let d = a.sub(b)?.norm();
        if d <= COINCIDENT_DISTANCE {
            return Err(Error::domain(format!(
                "triangle vertices coincide (distance {d:e})"
            )));
        }
    }
    let at = |v: &Tensor, p: &Tensor, q: &Tensor| -> Result<f64> {
        Ok(angle_between(&edge(v, p)?, &edge(v, q)?).to_degrees())
    };
    Ok(TriangleAngles {
        angle_x0: at(image, noise, latent)?,
        angle_xt: at(noise, image, latent)?,
        angle_latent: at(latent, noise, image)?,
    })
}

/// Most probable angle triple under independent per-angle histograms.
///
/// Angles are binned to the nearest multiple of `bin_width` degrees. Every
/// triple of bin centres summing to 180 is scored by the product of its three
/// bin frequencies; ties go to the smallest `angle_x0`, then `angle_xt`.
pub fn most_probable_triangle(
    samples: &[TriangleAngles],
    bin_width: f64,
) -> Result<TriangleAngles> {
    const MIN_SAMPLES: usize = 30;
    if samples.is_empty() {
        return Err(Error::domain("no triangle samples"));
    }
    if samples.len() < MIN_SAMPLES {
        return Err(Error::Precondition(format!(
            "need at least {MIN_SAMPLES} triangle samples, got {}",
            samples.len()
        )));
    }
    let bins_f = 180.0 / bin_width;
    if !(bin_width > 0.0) || (bins_f - bins_f.round()).abs() > 1e-9 {
        return Err(Error::param(
            "bin_width",
            format!("must divide 180 degrees evenly, got {bin_width}"),
        ));
    }
    let bins = bins_f.round() as usize;
    let hist = |get: fn(&TriangleAngles) -> f64| -> Vec<f64> {
        let mut h = vec![0.0; bins + 1];
        for s in samples {
            let b = (get(s) / bin_width).round().clamp(0.0, bins as f64) as usize;
            h[b] += 1.0;
        }
        h.iter().map(|c| c / samples.len() as f64).collect()
    };
    let h0 = hist(|t| t.angle_x0);
    let ht = hist(|t| t.angle_xt);
    let hl = hist(|t| t.angle_latent);
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for a in 0..=bins {
        for b in 0..=bins - a {
            let score = h0[a] * ht[b] * hl[bins - a - b];
            if score > best.0 {
                best = (score, a, b);
            }
        }
    }
    let (_, a, b) = best;
    Ok(TriangleAngles {
        angle_x0: a as f64 * bin_width,
        angle_xt: b as f64 * bin_width,
        angle_latent: (bins - a - b) as f64 * bin_width,
    })
}
