//! Noise schedules and inference timestep grids.
//!
//! Index `i` in every sequence is the training timestep `t = i + 1`. The clean
//! data boundary `t = 0` is not stored; [`NoiseSchedule::alpha_bar_or_one`]
//! returns exactly `1.0` for it.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::report::format_g17;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::param("train_steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(
                "beta_start",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"),
            ));
        }
        let betas = if train_steps == 1 {
            vec![beta_start]
        } else {
            let last = (train_steps - 1) as f64;
            (0..train_steps)
                .map(|i| {
                    let f = i as f64 / last;
                    beta_start + f * (beta_end - beta_start)
                })
                .collect()
        };
        Ok(Self::from_betas(
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            },
            betas,
        ))
    }

    /// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2)`, betas clipped to 0.999.
    pub fn cosine(train_steps: usize, offset: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::param("train_steps", "must be at least 1"));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::param(
                "cosine_offset",
                format!("must be > 0, got {offset}"),
            ));
        }
        let f = |t: usize| cosine_f(t, train_steps, offset);
        let f0 = f(0);
        let betas = (1..=train_steps)
            .map(|t| {
                let beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
                beta.min(COSINE_MAX_BETA)
            })
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine { offset }, betas))
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, index: usize) -> f64 {
        self.alpha_bars[index]
    }

    /// `alpha_bar` at an optional index; `None` is the clean boundary and is
    /// exactly one.
    pub fn alpha_bar_or_one(&self, index: Option<usize>) -> f64 {
        index.map_or(1.0, |i| self.alpha_bars[i])
    }

    /// Short identity string, also used in manifests.
    pub fn describe(&self) -> String {
        match self.kind {
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => format!(
                "linear(T_train={}, beta_start={}, beta_end={})",
                self.train_steps(),
                format_g17(beta_start),
                format_g17(beta_end)
            ),
            ScheduleKind::Cosine { offset } => format!(
                "cosine(T_train={}, s={})",
                self.train_steps(),
                format_g17(offset)
            ),
        }
    }

    /// SHA-256 over the construction parameters, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        hex::encode(digest)
    }

    /// `t,beta,alpha,alpha_bar` rows with `t` starting at 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for i in 0..self.train_steps() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                i + 1,
                format_g17(self.betas[i]),
                format_g17(self.alphas[i]),
                format_g17(self.alpha_bars[i])
            );
        }
        out
    }
}

fn cosine_f(t: usize, train_steps: usize, offset: f64) -> f64 {
    let x =
        ((t as f64 / train_steps as f64) + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

/// Strictly increasing schedule indices used at inference time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    train_steps: usize,
    steps: Vec<usize>,
}

impl TimestepGrid {
    /// Uniform stride ending at the last training index:
    /// `steps[i] = round((i + 1) * T_train / T) - 1`.
    pub fn uniform(train_steps: usize, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        if steps > train_steps {
            return Err(Error::param(
                "steps",
                format!("inference steps {steps} exceed training steps {train_steps}"),
            ));
        }
        // Integer round-half-up of (i + 1) * T_train / T.
        let (n, d) = (train_steps as u128, steps as u128);
        let idx = (0..steps as u128)
            .map(|i| ((2 * (i + 1) * n + d) / (2 * d) - 1) as usize)
            .collect();
        Self::from_steps(train_steps, idx)
    }

    pub fn from_steps(train_steps: usize, steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::param("steps", "grid is empty"));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("steps", "grid must be strictly increasing"));
        }
        if *steps.last().unwrap() != train_steps - 1 {
            return Err(Error::param(
                "steps",
                format!("grid must end at index {}", train_steps - 1),
            ));
        }
        Ok(Self { train_steps, steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Number of inference steps `T`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.train_steps() != self.train_steps {
            return Err(Error::Precondition(format!(
                "grid built for {} training steps, schedule has {}",
                self.train_steps,
                schedule.train_steps()
            )));
        }
        Ok(())
    }

    /// `(alpha_bar_prev, alpha_bar_t)` for transition `k`, which connects the
    /// state at grid position `k - 1` (or the clean boundary when `k == 0`)
    /// with the state at grid position `k`.
    pub fn alpha_bar_pair(&self, schedule: &NoiseSchedule, k: usize) -> (f64, f64) {
        let prev = if k == 0 {
            None
        } else {
            Some(self.steps[k - 1])
        };
        (
            schedule.alpha_bar_or_one(prev),
            schedule.alpha_bar(self.steps[k]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extended_product(betas: &[f64]) -> f64 {
        // Product accumulated in log space with compensated summation.
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for b in betas {
            let y = (-b).ln_1p() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum.exp()
    }

    fn assert_invariants(s: &NoiseSchedule) {
        for i in 0..s.train_steps() {
            assert!(s.betas()[i] > 0.0 && s.betas()[i] < 1.0);
            assert_eq!(s.alphas()[i], 1.0 - s.betas()[i]);
            let ab = s.alpha_bars()[i];
            assert!(ab > 0.0 && ab < 1.0);
            if i > 0 {
                let prev = s.alpha_bars()[i - 1];
                assert!(ab < prev);
                assert!((ab - s.alphas()[i] * prev).abs() <= 1e-12 * ab);
            }
        }
    }

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert_eq!(s.betas()[999], 0.02);
        assert_invariants(&s);
    }

    #[test]
    fn linear_single_step() {
        let s = NoiseSchedule::linear(1, 0.01, 0.01).unwrap();
        assert_eq!(s.alpha_bars(), &[0.99]);
    }

    #[test]
    fn linear_final_alpha_bar_matches_log_space_product() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let oracle = extended_product(s.betas());
        let got = s.alpha_bar(999);
        assert!(((got - oracle) / oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn linear_rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn cosine_long_horizon_monotone() {
        let s = NoiseSchedule::cosine(4000, 0.008).unwrap();
        assert!(s.alpha_bar(0) < 1.0);
        assert_invariants(&s);
    }

    #[test]
    fn cosine_short_horizon_betas_clipped() {
        let s = NoiseSchedule::cosine(10, 0.008).unwrap();
        assert!(s.betas().iter().all(|&b| b < 1.0));
        assert_eq!(*s.betas().last().unwrap(), 0.999);
        assert_invariants(&s);
    }

    #[test]
    fn cosine_matches_closed_form() {
        let s = NoiseSchedule::cosine(100, 0.008).unwrap();
        let f = |t: f64| {
            (((t / 100.0) + 0.008) / 1.008 * std::f64::consts::PI / 2.0)
                .cos()
                .powi(2)
        };
        let direct = f(50.0) / f(0.0);
        // t = 50 lives at index 49
        let got = s.alpha_bar(49);
        assert!(((got - direct) / direct).abs() < 1e-12, "{got} vs {direct}");
    }

    #[test]
    fn grid_identity() {
        let g = TimestepGrid::uniform(1000, 1000).unwrap();
        assert_eq!(g.steps(), (0..1000).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn grid_stride_ten() {
        let g = TimestepGrid::uniform(1000, 10).unwrap();
        let want: Vec<usize> = (1..=10).map(|i| i * 100 - 1).collect();
        assert_eq!(g.steps(), want.as_slice());
    }

    #[test]
    fn grid_single_step_is_last() {
        assert_eq!(TimestepGrid::uniform(10, 1).unwrap().steps(), &[9]);
    }

    #[test]
    fn grid_rejects_too_many_steps() {
        let err = TimestepGrid::uniform(10, 11).unwrap_err();
        assert!(matches!(err, Error::Parameter { field: "steps", .. }));
    }

    #[test]
    fn grid_pairs_use_clean_boundary_first() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let g = TimestepGrid::uniform(100, 10).unwrap();
        assert_eq!(g.alpha_bar_pair(&s, 0), (1.0, s.alpha_bar(9)));
        assert_eq!(g.alpha_bar_pair(&s, 3), (s.alpha_bar(29), s.alpha_bar(39)));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let csv = s.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,0.10000000000000001,0.90000000000000002,"));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cumulative_product_recomputes(t in 1usize..3000, a in 1e-5f64..0.05, span in 0.0f64..0.5) {
                let b = (a + span).min(0.9);
                let s = NoiseSchedule::linear(t, a, b).unwrap();
                let mut acc = 1.0;
                for i in 0..t {
                    acc *= 1.0 - s.betas()[i];
                    prop_assert!((acc - s.alpha_bars()[i]).abs() <= 1e-12 * acc);
                }
            }

            #[test]
            fn grids_are_strictly_increasing(train in 1usize..5000, frac in 0.0f64..1.0) {
                let steps = 1 + ((train - 1) as f64 * frac) as usize;
                let g = TimestepGrid::uniform(train, steps).unwrap();
                prop_assert_eq!(g.len(), steps);
                prop_assert_eq!(*g.steps().last().unwrap(), train - 1);
                prop_assert!(g.steps().windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
