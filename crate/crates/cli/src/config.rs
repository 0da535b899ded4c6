//! Declarative run configuration read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latentlab::denoiser::make_flatfield_dataset;
use latentlab::io::RunManifest;
use latentlab::pipeline::{InversionMethod, World};
use latentlab::report::format_g17;
use latentlab::{DatasetSpec, NoiseSchedule, PatchRect, TimestepGrid};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub samples: usize,
    pub seed: u64,
    pub eta: f64,
    /// Inversion methods, each `naive`, `fixedpoint:K`, or `hybrid:T'`.
    pub methods: Vec<String>,
    /// Forward-replaced share of the grid, in percent of `T`.
    pub sweep: Vec<f64>,
    /// Interpolation weights; defaults to sixths of the unit interval.
    pub lambdas: Vec<f64>,
    /// Directory of an earlier `sample` run to reuse instead of sampling.
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Evaluate the declared assertions and fail the run when one does not hold.
    pub checks: bool,
    pub schedule: ScheduleConfig,
    pub grid: GridConfig,
    pub dataset: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            seed: 20240917,
            eta: 0.0,
            methods: vec!["naive".into(), "hybrid:2".into()],
            sweep: vec![0.0, 1.0, 2.0, 5.0, 10.0, 20.0],
            lambdas: (0..=6).map(|i| i as f64 / 6.0).collect(),
            input: None,
            out: None,
            workers: None,
            checks: true,
            schedule: ScheduleConfig::default(),
            grid: GridConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: String,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_s: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: "linear".into(),
            train_steps: 1000,
            beta_start: latentlab::schedule::DEFAULT_BETA_START,
            beta_end: latentlab::schedule::DEFAULT_BETA_END,
            cosine_s: latentlab::schedule::DEFAULT_COSINE_OFFSET,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub palette: Vec<f64>,
    pub texture_amplitude: f64,
    /// `[top, left, height, width]`.
    pub texture_patch: [usize; 4],
    pub component_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 256,
            height: 32,
            width: 32,
            channels: 1,
            palette: vec![-0.5, 0.0, 0.5],
            texture_amplitude: 1.0,
            texture_patch: [8, 8, 16, 16],
            component_std: 0.01,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        let [top, left, height, width] = self.texture_patch;
        DatasetSpec {
            count: self.count,
            height: self.height,
            width: self.width,
            channels: self.channels,
            background_palette: self.palette.clone(),
            texture_amplitude: self.texture_amplitude,
            texture_patch: PatchRect {
                top,
                left,
                height,
                width,
            },
            seed: self.seed,
            component_std: self.component_std,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            bail!("invalid parameter `samples`: must be at least 1");
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            bail!("invalid parameter `eta`: must be finite and non-negative");
        }
        if self.methods.is_empty() {
            bail!("invalid parameter `methods`: list is empty");
        }
        for m in &self.methods {
            m.parse::<InversionMethod>()
                .with_context(|| format!("invalid entry in `methods`: {m:?}"))?;
        }
        if let Some(bad) = self.sweep.iter().find(|p| !(0.0..=100.0).contains(*p)) {
            bail!("invalid parameter `sweep`: {bad} is not a percentage in [0, 100]");
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            bail!("invalid parameter `lambdas`: {bad} is outside [0, 1]");
        }
        if self.workers == Some(0) {
            bail!("invalid parameter `workers`: must be at least 1");
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<InversionMethod> {
        self.methods
            .iter()
            .map(|m| m.parse().expect("validated"))
            .collect()
    }

    pub fn world(&self) -> Result<World> {
        let s = &self.schedule;
        let schedule = match s.kind.as_str() {
            "linear" => NoiseSchedule::linear(s.train_steps, s.beta_start, s.beta_end),
            "cosine" => NoiseSchedule::cosine(s.train_steps, s.cosine_s),
            other => {
                bail!("invalid parameter `schedule.kind`: expected linear or cosine, got {other:?}")
            }
        }
        .context("invalid [schedule] section")?;
        let grid = TimestepGrid::uniform(s.train_steps, self.grid.steps)
            .context("invalid parameter `grid.steps`")?;
        let data =
            make_flatfield_dataset(&self.dataset.spec()).context("invalid [dataset] section")?;
        Ok(World::new(schedule, grid, data.model)?)
    }

    /// Every resolved setting as `config.*` manifest entries. Output
    /// location and worker count are left out: neither affects the results.
    pub fn record(&self, manifest: &mut RunManifest) {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format_g17(*x))
                .collect::<Vec<_>>()
                .join(" ")
        };
        manifest
            .set("config.samples", self.samples)
            .set("config.seed", self.seed)
            .set("config.eta", format_g17(self.eta))
            .set("config.methods", self.methods.join(" "))
            .set("config.sweep", list(&self.sweep))
            .set("config.lambdas", list(&self.lambdas))
            .set(
                "config.input",
                self.input
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            )
            .set("config.checks", self.checks)
            .set("config.schedule.kind", &self.schedule.kind)
            .set("config.schedule.train_steps", self.schedule.train_steps)
            .set(
                "config.schedule.beta_start",
                format_g17(self.schedule.beta_start),
            )
            .set(
                "config.schedule.beta_end",
                format_g17(self.schedule.beta_end),
            )
            .set(
                "config.schedule.cosine_s",
                format_g17(self.schedule.cosine_s),
            )
            .set("config.grid.steps", self.grid.steps);
        let d = &self.dataset;
        manifest
            .set("config.dataset.count", d.count)
            .set("config.dataset.height", d.height)
            .set("config.dataset.width", d.width)
            .set("config.dataset.channels", d.channels)
            .set("config.dataset.palette", list(&d.palette))
            .set(
                "config.dataset.texture_amplitude",
                format_g17(d.texture_amplitude),
            )
            .set(
                "config.dataset.texture_patch",
                d.texture_patch.map(|v| v.to_string()).join(" "),
            )
            .set("config.dataset.component_std", format_g17(d.component_std))
            .set("config.dataset.seed", d.seed);
    }
}
