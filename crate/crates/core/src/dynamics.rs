//! Sampling and inversion trajectories.
//!
//! States are stored in time order: `states[0]` is the clean boundary and
//! `states[k + 1]` is the state at grid position `k`. Transition `k` connects
//! `states[k]` and `states[k + 1]` using the pair of cumulative alphas returned
//! by [`TimestepGrid::alpha_bar_pair`], so sampling and inversion are exact
//! inverses of each other when they share the same noise prediction.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::GmmModel;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sampling,
    Inversion,
}

/// How a trajectory was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Sample { eta: f64 },
    Naive,
    FixedPoint(FixedPointConfig),
    Hybrid(HybridConfig),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Sample { eta } => write!(f, "sample(eta={eta})"),
            Method::Naive => f.write_str("naive"),
            Method::FixedPoint(c) => write!(f, "fixedpoint:{}", c.iterations),
            Method::Hybrid(c) => write!(f, "hybrid:{}", c.t_prime_index),
        }
    }
}

/// Fixed-point refinement of each inversion step.
///
/// `eps^(0)` is the naive prediction at the previous state; iterate `j` is
/// `eps^(j) = eps(x_t^(j-1))` where `x_t^(j-1)` is the inversion step taken
/// with `eps^(j-1)`. The step uses the mean of iterates
/// `average_from..=iterations`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointConfig {
    pub iterations: usize,
    pub average_from: usize,
}

impl FixedPointConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            average_from: 1,
        }
    }

    /// Use only the last iterate.
    pub fn last_iterate(iterations: usize) -> Self {
        Self {
            iterations,
            average_from: iterations,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations > 0 && !(1..=self.iterations).contains(&self.average_from) {
            return Err(Error::param(
                "average_from",
                format!(
                    "must lie in 1..={} for {} iterations",
                    self.iterations, self.iterations
                ),
            ));
        }
        Ok(())
    }
}

/// Replace the first `t_prime_index` inversion steps with one forward
/// diffusion jump driven by a fresh seeded Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridConfig {
    pub t_prime_index: usize,
    pub seed: u64,
}

/// Identity of the run that produced a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub schedule: String,
    pub schedule_hash: String,
    pub eta: f64,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimestepGrid,
    /// `len = T + 1`, time ordered.
    pub states: Vec<Tensor>,
    /// `len = T`; `eps_records[k]` is the prediction used by transition `k`.
    pub eps_records: Vec<Tensor>,
    pub direction: Direction,
    pub seed: Option<u64>,
    pub meta: TrajectoryMeta,
    /// Per-step fixed-point residuals (max-abs), fixed-point inversion only.
    pub residuals: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn clean(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn noisy(&self) -> &Tensor {
        self.states.last().expect("trajectory has states")
    }

    /// Most-noisy state; the latent for inversions.
    pub fn latent(&self) -> &Tensor {
        self.noisy()
    }

    pub fn check_complete(&self) -> Result<()> {
        let t = self.grid.len();
        if self.states.len() != t + 1 || self.eps_records.len() != t {
            return Err(Error::Precondition(format!(
                "trajectory over {t} steps has {} states and {} noise records",
                self.states.len(),
                self.eps_records.len()
            )));
        }
        Ok(())
    }
}

fn meta(schedule: &NoiseSchedule, eta: f64, method: Method) -> TrajectoryMeta {
    TrajectoryMeta {
        schedule: schedule.describe(),
        schedule_hash: schedule.hash(),
        eta,
        method,
    }
}

/// `x_t = sqrt(a) x_0 + sqrt(1 - a) eps`.
pub fn forward_diffuse(x0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::domain(format!(
            "alpha_bar must lie in [0, 1], got {alpha_bar}"
        )));
    }
    x0.lincomb(alpha_bar.sqrt(), noise, (1.0 - alpha_bar).sqrt())
}

/// One generalized DDIM update from `x_t` to `x_prev`.
///
/// `sigma = eta * sqrt((1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev))`; the
/// stochastic term needs `z` whenever `eta > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= alpha_bar_prev && alpha_bar_prev <= 1.0) {
        return Err(Error::domain(format!(
            "need 0 < alpha_bar_t <= alpha_bar_prev <= 1, got {alpha_bar_t} and {alpha_bar_prev}"
        )));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::param(
            "eta",
            format!("must be finite and >= 0, got {eta}"),
        ));
    }
    x_t.ensure_same_shape(eps)?;
    let beta = 1.0 - alpha_bar_t / alpha_bar_prev;
    let sigma = if eta == 0.0 || beta == 0.0 {
        0.0
    } else {
        eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * beta).sqrt()
    };
    let dir_sq = 1.0 - alpha_bar_prev - sigma * sigma;
    if dir_sq < -1e-15 {
        return Err(Error::domain(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar_prev = {}",
            sigma * sigma,
            1.0 - alpha_bar_prev
        )));
    }
    let dir = dir_sq.max(0.0).sqrt();
    let ratio = (alpha_bar_prev / alpha_bar_t).sqrt();
    let eps_coef = dir - ratio * (1.0 - alpha_bar_t).sqrt();
    let mut out = x_t.lincomb(ratio, eps, eps_coef)?;
    if sigma > 0.0 {
        let z = z.ok_or_else(|| {
            Error::Precondition("stochastic DDIM step (eta > 0) needs a noise draw".into())
        })?;
        out = out.lincomb(1.0, z, sigma)?;
    }
    Ok(out)
}

/// Deterministic inversion update from `x_prev` to `x_t`:
/// `x_t = sqrt(alpha) x_prev + (sqrt(1 - a_t) - sqrt(alpha - a_t)) eps` with
/// `alpha = a_t / a_prev`.
pub fn ddim_invert_step(
    x_prev: &Tensor,
    eps: &Tensor,
    alpha_bar_prev: f64,
    alpha_bar_t: f64,
) -> Result<Tensor> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= alpha_bar_prev && alpha_bar_prev <= 1.0) {
        return Err(Error::domain(format!(
            "need 0 < alpha_bar_t <= alpha_bar_prev <= 1, got {alpha_bar_t} and {alpha_bar_prev}"
        )));
    }
    let (x_coef, eps_coef) = invert_coefficients(alpha_bar_prev, alpha_bar_t);
    x_prev.lincomb(x_coef, eps, eps_coef)
}

fn invert_coefficients(alpha_bar_prev: f64, alpha_bar_t: f64) -> (f64, f64) {
    let alpha = alpha_bar_t / alpha_bar_prev;
    let eps_coef = (1.0 - alpha_bar_t).sqrt() - (alpha - alpha_bar_t).max(0.0).sqrt();
    (alpha.sqrt(), eps_coef)
}

/// DDIM (eta = 0) or DDPM-like (eta > 0) sampling from `x_T` down to the clean
/// boundary. `seed` keys the per-step noise when `eta > 0`.
pub fn ddim_sample(
    model: &GmmModel,
    x_t: &Tensor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    eta: f64,
    seed: u64,
) -> Result<Trajectory> {
    grid.check_schedule(schedule)?;
    let t = grid.len();
    let mut states = vec![Tensor::zeros(&[0]); t + 1];
    let mut eps_records = vec![Tensor::zeros(&[0]); t];
    let mut rng = stream(seed, Purpose::StepNoise, 0);
    let mut x = x_t.clone();
    states[t] = x.clone();
    for k in (0..t).rev() {
        let (prev, cur) = grid.alpha_bar_pair(schedule, k);
        let eps = model.predict_noise(&x, cur)?;
        let z = if eta > 0.0 {
            let data = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            Some(Tensor::new(x.shape().to_vec(), data)?)
        } else {
            None
        };
        x = ddim_step(&x, &eps, cur, prev, eta, z.as_ref())?;
        eps_records[k] = eps;
        states[k] = x.clone();
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        eps_records,
        direction: Direction::Sampling,
        seed: Some(seed),
        meta: meta(schedule, eta, Method::Sample { eta }),
        residuals: None,
    })
}

/// Deterministic decode of a latent: the clean state of an eta = 0 run.
pub fn reconstruct(
    model: &GmmModel,
    latent: &Tensor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
) -> Result<Tensor> {
    grid.check_schedule(schedule)?;
    let mut x = latent.clone();
    for k in (0..grid.len()).rev() {
        let (prev, cur) = grid.alpha_bar_pair(schedule, k);
        let eps = model.predict_noise(&x, cur)?;
        x = ddim_step(&x, &eps, cur, prev, 0.0, None)?;
    }
    Ok(x)
}

fn check_image(model: &GmmModel, x0: &Tensor) -> Result<()> {
    if x0.shape() != model.shape() {
        return Err(Error::Shape {
            expected: model.shape().to_vec(),
            actual: x0.shape().to_vec(),
        });
    }
    Ok(())
}

/// Inversion that approximates `eps(x_t)` with `eps(x_prev)` at timestep `t`.
pub fn ddim_invert_naive(
    model: &GmmModel,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
) -> Result<Trajectory> {
    grid.check_schedule(schedule)?;
    check_image(model, x0)?;
    let (states, eps_records) = invert_from(model, x0.clone(), 0, schedule, grid)?;
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        eps_records,
        direction: Direction::Inversion,
        seed: None,
        meta: meta(schedule, 0.0, Method::Naive),
        residuals: None,
    })
}

/// Naive inversion of transitions `start..T`, beginning at `x` (the state at
/// boundary `start`). Returns only the states and records it produced, with
/// `x` as the first state.
fn invert_from(
    model: &GmmModel,
    mut x: Tensor,
    start: usize,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let t = grid.len();
    let mut states = Vec::with_capacity(t + 1 - start);
    let mut eps_records = Vec::with_capacity(t - start);
    states.push(x.clone());
    for k in start..t {
        let (prev, cur) = grid.alpha_bar_pair(schedule, k);
        let eps = model.predict_noise(&x, cur)?;
        x = ddim_invert_step(&x, &eps, prev, cur)?;
        eps_records.push(eps);
        states.push(x.clone());
    }
    Ok((states, eps_records))
}

/// Inversion with per-step fixed-point refinement of the noise prediction.
/// `iterations == 0` is exactly [`ddim_invert_naive`] (plus residuals).
pub fn ddim_invert_fixedpoint(
    model: &GmmModel,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    config: FixedPointConfig,
) -> Result<Trajectory> {
    grid.check_schedule(schedule)?;
    check_image(model, x0)?;
    config.validate()?;
    let t = grid.len();
    let mut states = Vec::with_capacity(t + 1);
    let mut eps_records = Vec::with_capacity(t);
    let mut residuals = Vec::with_capacity(t);
    let mut x = x0.clone();
    states.push(x.clone());
    for k in 0..t {
        let (prev, cur) = grid.alpha_bar_pair(schedule, k);
        let mut iterate = model.predict_noise(&x, cur)?;
        let eps = if config.iterations == 0 {
            iterate
        } else {
            let mut acc = Tensor::zeros(x.shape());
            let mut used = 0usize;
            for j in 1..=config.iterations {
                let candidate = ddim_invert_step(&x, &iterate, prev, cur)?;
                iterate = model.predict_noise(&candidate, cur)?;
                if j >= config.average_from {
                    acc = acc.add(&iterate)?;
                    used += 1;
                }
            }
            acc.scale(1.0 / used as f64)
        };
        let next = ddim_invert_step(&x, &eps, prev, cur)?;
        // |x_t - (sqrt(alpha) x_prev + c eps(x_t))| = |c| |eps - eps(x_t)|
        let at_next = model.predict_noise(&next, cur)?;
        let (_, c) = invert_coefficients(prev, cur);
        residuals.push(c.abs() * eps.max_abs_diff(&at_next)?);
        x = next;
        eps_records.push(eps);
        states.push(x.clone());
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        eps_records,
        direction: Direction::Inversion,
        seed: None,
        meta: meta(schedule, 0.0, Method::FixedPoint(config)),
        residuals: Some(residuals),
    })
}

/// Forward-diffuse straight to grid position `t_prime_index - 1` with a fresh
/// Gaussian, then invert naively over the remaining steps. The skipped
/// transitions are recorded as forward-diffusion states sharing that Gaussian,
/// which is what an inversion step with a constant noise prediction produces.
pub fn hybrid_invert(
    model: &GmmModel,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    config: HybridConfig,
) -> Result<Trajectory> {
    grid.check_schedule(schedule)?;
    check_image(model, x0)?;
    let t = grid.len();
    let tp = config.t_prime_index;
    if tp > t {
        return Err(Error::param(
            "t_prime",
            format!("forward steps {tp} exceed the {t} inversion steps"),
        ));
    }
    let (mut states, mut eps_records) = if tp == 0 {
        invert_from(model, x0.clone(), 0, schedule, grid)?
    } else {
        let mut rng = stream(config.seed, Purpose::ForwardJump, 0);
        let noise = Tensor::randn(x0.shape(), &mut rng);
        let mut states = vec![x0.clone()];
        for &idx in &grid.steps()[..tp] {
            states.push(forward_diffuse(x0, schedule.alpha_bar(idx), &noise)?);
        }
        let mut eps_records = vec![noise; tp];
        let start = states.pop().expect("forward jump state");
        let (tail_states, tail_eps) = invert_from(model, start, tp, schedule, grid)?;
        states.extend(tail_states);
        eps_records.extend(tail_eps);
        (states, eps_records)
    };
    states.shrink_to_fit();
    eps_records.shrink_to_fit();
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        eps_records,
        direction: Direction::Inversion,
        seed: Some(config.seed),
        meta: meta(schedule, 0.0, Method::Hybrid(config)),
        residuals: None,
    })
}

/// Noise prediction the inversion makes at transition `upto_index` when every
/// earlier transition was inverted with the cached sampling prediction.
///
/// Starting from the sampled image, transitions `0..upto_index` are inverted
/// with `sampling.eps_records`; the model is then queried at the resulting
/// state with the timestep of transition `upto_index`.
pub fn teacher_forced_invert(
    model: &GmmModel,
    schedule: &NoiseSchedule,
    sampling: &Trajectory,
    upto_index: usize,
) -> Result<Tensor> {
    sampling.check_complete()?;
    if sampling.direction != Direction::Sampling {
        return Err(Error::Precondition(
            "teacher forcing needs a sampling trajectory".into(),
        ));
    }
    let grid = &sampling.grid;
    grid.check_schedule(schedule)?;
    if upto_index >= grid.len() {
        return Err(Error::param(
            "upto_index",
            format!("index {upto_index} out of range for {} steps", grid.len()),
        ));
    }
    let x = teacher_forced_state(schedule, sampling, upto_index)?;
    let (_, cur) = grid.alpha_bar_pair(schedule, upto_index);
    model.predict_noise(&x, cur)
}

/// State reached by inverting transitions `0..upto` with cached predictions.
pub fn teacher_forced_state(
    schedule: &NoiseSchedule,
    sampling: &Trajectory,
    upto: usize,
) -> Result<Tensor> {
    let mut x = sampling.clean().clone();
    for k in 0..upto {
        let (prev, cur) = sampling.grid.alpha_bar_pair(schedule, k);
        x = ddim_invert_step(&x, &sampling.eps_records[k], prev, cur)?;
    }
    Ok(x)
}
