//! `latentlab` experiment harness.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::Ctx;
use config::ExperimentConfig;
use run::RunDir;

#[derive(Parser)]
#[command(
    name = "latentlab",
    version,
    about = "DDIM sampling and inversion experiments on analytic mixture priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (overrides `workers`); results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overwrite an existing run in the output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate images with the DDIM sampler.
    Sample,
    /// Invert generated images with each configured method.
    Invert,
    /// Per-region latent statistics, correlation, KL, and bitrate.
    Metrics,
    /// SLERP between paired noises and latents, then decode.
    Interpolate,
    /// Teacher-forced noise-prediction error along sampling trajectories.
    ErrorProfile,
    /// Noise, image, and latent triangle angles.
    Triangles,
    /// Smallest-l2 assignment between noises, images, and latents.
    Assignment,
    /// Sweep the share of inversion steps replaced by a forward jump.
    SweepForward,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Invert => "invert",
            Command::Metrics => "metrics",
            Command::Interpolate => "interpolate",
            Command::ErrorProfile => "error-profile",
            Command::Triangles => "triangles",
            Command::Assignment => "assignment",
            Command::SweepForward => "sweep-forward",
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    cfg.validate()?;
    let out = cfg
        .out
        .clone()
        .context("no output directory: pass --out or set `out` in the config")?;
    let world = cfg.world()?;
    let ctx = Ctx {
        cfg: &cfg,
        world,
        workers: cfg.workers.unwrap_or(1),
    };
    let mut run = RunDir::start(cli.command.name(), &out, &cfg, cli.force)?;
    match cli.command {
        Command::Sample => commands::sample(&ctx, &mut run),
        Command::Invert => commands::invert_cmd(&ctx, &mut run),
        Command::Metrics => commands::metrics(&ctx, &mut run),
        Command::Interpolate => commands::interpolate(&ctx, &mut run),
        Command::ErrorProfile => commands::error_profile(&ctx, &mut run),
        Command::Triangles => commands::triangles(&ctx, &mut run),
        Command::Assignment => commands::assignment(&ctx, &mut run),
        Command::SweepForward => commands::sweep_forward(&ctx, &mut run),
    }?;
    run.finish()
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
