//! Per-step inversion error against a cached sampling run.

use crate::denoiser::GmmModel;
use crate::dynamics::{ddim_invert_step, Direction, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::mask::Mask;
use crate::metrics::stats::{mean, population_std};
use crate::schedule::NoiseSchedule;
use crate::tensor::{pairwise_sum, Tensor};

/// Series indexed by inversion step `1..=T` (`steps[k] = k + 1`).
///
/// `xi_*` is the region sum of `|E^I_t - E^S_t|` divided by the l1 norm of the
/// inversion prediction `E^I_t` over the whole tensor. `std_ratio_*` is
/// `std(E^I_t) / std(E^S_t)` over the region's pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    pub steps: Vec<usize>,
    pub xi_plain: Vec<f64>,
    pub xi_nonplain: Vec<f64>,
    pub std_ratio_plain: Vec<f64>,
    pub std_ratio_nonplain: Vec<f64>,
}

impl ErrorProfile {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of `series` over the first `n` steps.
    pub fn cumulative(series: &[f64], n: usize) -> f64 {
        pairwise_sum(&series[..n.min(series.len())])
    }

    /// Minimum of `series` over the first `n` steps.
    pub fn min_over(series: &[f64], n: usize) -> f64 {
        series[..n.min(series.len())]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn std_ratio(inv: &[f64], samp: &[f64]) -> f64 {
    let num = population_std(inv);
    let den = population_std(samp);
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Teacher-forced error profile of one sampling trajectory.
///
/// At step `k` the inversion state is the one reached by undoing transitions
/// `0..k` with the cached sampling predictions, which equals what
/// [`crate::dynamics::teacher_forced_invert`] computes; it is carried forward
/// here instead of being rebuilt for every probe.
pub fn inversion_error_profile(
    model: &GmmModel,
    schedule: &NoiseSchedule,
    sampling: &Trajectory,
    plain: &Mask,
) -> Result<ErrorProfile> {
    if sampling.direction != Direction::Sampling {
        return Err(Error::Precondition(
            "error profile needs a sampling trajectory".into(),
        ));
    }
    sampling.check_complete()?;
    sampling.grid.check_schedule(schedule)?;
    plain.check_covers(sampling.clean())?;
    let nonplain = plain.complement();
    let t = sampling.grid.len();
    let mut profile = ErrorProfile {
        steps: (1..=t).collect(),
        xi_plain: Vec::with_capacity(t),
        xi_nonplain: Vec::with_capacity(t),
        std_ratio_plain: Vec::with_capacity(t),
        std_ratio_nonplain: Vec::with_capacity(t),
    };
    let mut x = sampling.clean().clone();
    for k in 0..t {
        let (prev, cur) = sampling.grid.alpha_bar_pair(schedule, k);
        let e_s = &sampling.eps_records[k];
        let e_i = model.predict_noise(&x, cur)?;
        let xi = e_i.zip_map(e_s, |a, b| (a - b).abs())?;
        let l1 = pairwise_sum(&e_i.data().iter().map(|v| v.abs()).collect::<Vec<_>>());
        for (mask, xi_out, ratio_out) in [
            (plain, &mut profile.xi_plain, &mut profile.std_ratio_plain),
            (
                &nonplain,
                &mut profile.xi_nonplain,
                &mut profile.std_ratio_nonplain,
            ),
        ] {
            if mask.count() == 0 {
                xi_out.push(0.0);
                ratio_out.push(f64::NAN);
                continue;
            }
            let region = pairwise_sum(&mask.select(&xi)?);
            xi_out.push(if l1 > 0.0 { region / l1 } else { 0.0 });
            ratio_out.push(std_ratio(&mask.select(&e_i)?, &mask.select(e_s)?));
        }
        x = ddim_invert_step(&x, e_s, prev, cur)?;
    }
    Ok(profile)
}

/// Step-wise mean of per-sample profiles, skipping `NaN` entries.
pub fn mean_profile(profiles: &[ErrorProfile]) -> Result<ErrorProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::domain("no profiles to average"))?;
    if profiles.iter().any(|p| p.steps != first.steps) {
        return Err(Error::Precondition("profiles cover different steps".into()));
    }
    let avg = |get: fn(&ErrorProfile) -> &Vec<f64>| -> Vec<f64> {
        (0..first.len())
            .map(|k| {
                let vals: Vec<f64> = profiles
                    .iter()
                    .map(|p| get(p)[k])
                    .filter(|v| !v.is_nan())
                    .collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    mean(&vals)
                }
            })
            .collect()
    };
    Ok(ErrorProfile {
        steps: first.steps.clone(),
        xi_plain: avg(|p| &p.xi_plain),
        xi_nonplain: avg(|p| &p.xi_nonplain),
        std_ratio_plain: avg(|p| &p.std_ratio_plain),
        std_ratio_nonplain: avg(|p| &p.std_ratio_nonplain),
    })
}

/// Scalar `|E^I - E^S|` map of one step, useful for plotting.
pub fn xi_map(e_inv: &Tensor, e_samp: &Tensor) -> Result<Tensor> {
    e_inv.zip_map(e_samp, |a, b| (a - b).abs())
}
