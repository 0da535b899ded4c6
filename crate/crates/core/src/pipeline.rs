//! Per-sample experiment pipelines shared by the harness and the tests.

use std::fmt;
use std::str::FromStr;

use crate::denoiser::GmmModel;
use crate::dynamics::{
    ddim_invert_fixedpoint, ddim_invert_naive, ddim_sample, hybrid_invert, reconstruct,
    FixedPointConfig, HybridConfig, Trajectory,
};
use crate::error::{Error, Result};
use crate::metrics::mask::{plain_mask, Mask, DEFAULT_PLAIN_TAU};
use crate::parallel::par_map;
use crate::rng::{derive_seed, stream, Purpose};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::tensor::Tensor;

/// A prior together with the schedule and grid it is sampled on.
#[derive(Debug, Clone)]
pub struct World {
    pub schedule: NoiseSchedule,
    pub grid: TimestepGrid,
    pub model: GmmModel,
}

impl World {
    pub fn new(schedule: NoiseSchedule, grid: TimestepGrid, model: GmmModel) -> Result<Self> {
        grid.check_schedule(&schedule)?;
        Ok(Self {
            schedule,
            grid,
            model,
        })
    }

    /// Same prior and schedule on a different inference grid.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let grid = TimestepGrid::uniform(self.schedule.train_steps(), steps)?;
        World::new(self.schedule.clone(), grid, self.model.clone())
    }

    pub fn shape(&self) -> &[usize] {
        self.model.shape()
    }
}

/// Inversion method selector, written `naive`, `fixedpoint:K`, or
/// `hybrid:T'` where `T'` counts leading grid steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMethod {
    Naive,
    FixedPoint(usize),
    Hybrid(usize),
}

impl fmt::Display for InversionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InversionMethod::Naive => f.write_str("naive"),
            InversionMethod::FixedPoint(k) => write!(f, "fixedpoint:{k}"),
            InversionMethod::Hybrid(t) => write!(f, "hybrid:{t}"),
        }
    }
}

impl FromStr for InversionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::param(
                "method",
                format!("expected naive, fixedpoint:K, or hybrid:T, got {s:?}"),
            )
        };
        match s.split_once(':') {
            None if s == "naive" => Ok(InversionMethod::Naive),
            Some(("fixedpoint", k)) => k
                .parse()
                .map(InversionMethod::FixedPoint)
                .map_err(|_| bad()),
            Some(("hybrid", t)) => t.parse().map(InversionMethod::Hybrid).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Generated sample: its initial noise, the sampling run, and the plain mask
/// of the generated image.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub index: usize,
    pub noise: Tensor,
    pub sampling: Trajectory,
    pub plain: Mask,
}

impl SampleRun {
    pub fn image(&self) -> &Tensor {
        self.sampling.clean()
    }
}

pub fn initial_noise(shape: &[usize], seed: u64, index: usize) -> Tensor {
    Tensor::randn(
        shape,
        &mut stream(seed, Purpose::InitialNoise, index as u64),
    )
}

pub fn sample_one(world: &World, seed: u64, eta: f64, index: usize) -> Result<SampleRun> {
    sample_from_noise(
        world,
        initial_noise(world.shape(), seed, index),
        seed,
        eta,
        index,
    )
}

/// Sample from a given `x_T`; `seed` and `index` key the step noise only.
pub fn sample_from_noise(
    world: &World,
    noise: Tensor,
    seed: u64,
    eta: f64,
    index: usize,
) -> Result<SampleRun> {
    let sampling = ddim_sample(
        &world.model,
        &noise,
        &world.schedule,
        &world.grid,
        eta,
        derive_seed(seed, index as u64),
    )?;
    let plain = plain_mask(sampling.clean(), DEFAULT_PLAIN_TAU)?;
    Ok(SampleRun {
        index,
        noise,
        sampling,
        plain,
    })
}

pub fn sample_many(
    world: &World,
    count: usize,
    seed: u64,
    eta: f64,
    workers: usize,
) -> Result<Vec<SampleRun>> {
    par_map(workers, count, |i| sample_one(world, seed, eta, i))
}

/// Invert `x0`; `seed` keys the forward-jump noise of hybrid inversion.
pub fn invert(
    world: &World,
    x0: &Tensor,
    method: InversionMethod,
    seed: u64,
) -> Result<Trajectory> {
    let (m, s, g) = (&world.model, &world.schedule, &world.grid);
    match method {
        InversionMethod::Naive => ddim_invert_naive(m, x0, s, g),
        InversionMethod::FixedPoint(k) => {
            ddim_invert_fixedpoint(m, x0, s, g, FixedPointConfig::new(k))
        }
        InversionMethod::Hybrid(t) => hybrid_invert(
            m,
            x0,
            s,
            g,
            HybridConfig {
                t_prime_index: t,
                seed,
            },
        ),
    }
}

/// Per-sample hybrid seed derived from the run seed.
pub fn hybrid_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed ^ 0x6879_6272_6964, index as u64)
}

pub fn decode(world: &World, latent: &Tensor) -> Result<Tensor> {
    reconstruct(&world.model, latent, &world.schedule, &world.grid)
}

/// Mean absolute error between `x0` and the decode of `latent`.
pub fn round_trip_error(world: &World, x0: &Tensor, latent: &Tensor) -> Result<f64> {
    decode(world, latent)?.mean_abs_diff(x0)
}

/// `t'` as a share of the grid, rounded to the nearest step (at least one
/// step for any positive share).
pub fn forward_steps_for_share(grid_len: usize, share: f64) -> usize {
    if share <= 0.0 {
        return 0;
    }
    ((share * grid_len as f64).round() as usize).clamp(1, grid_len)
}
