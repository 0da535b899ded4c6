//! Output directory bookkeeping: manifest lifecycle, artifacts, and checks.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latentlab::io::{self, RunManifest};
use latentlab::{MetricsReport, Tensor};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.txt";

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
    checks: Vec<Check>,
    enforce: bool,
}

impl RunDir {
    /// Create the output directory and write a preliminary manifest.
    pub fn start(
        command: &str,
        root: &Path,
        config: &ExperimentConfig,
        force: bool,
    ) -> Result<Self> {
        let path = root.join(MANIFEST);
        if path.exists() && !force {
            bail!(
                "{} already exists; pass --force to overwrite the run",
                path.display()
            );
        }
        std::fs::create_dir_all(root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        let mut manifest = RunManifest::new();
        manifest
            .set("command", command)
            .set("version", env!("CARGO_PKG_VERSION"));
        config.record(&mut manifest);
        manifest.set("status", "running");
        manifest.write(&path, root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            checks: Vec::new(),
            enforce: config.checks,
        })
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.manifest.set(key, value);
    }

    fn target(&self, relative: &str) -> Result<PathBuf> {
        let path = self.root.join(relative);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("cannot create {}", dir.display()))?;
        }
        Ok(path)
    }

    fn name_of(relative: &str) -> String {
        relative
            .rsplit_once('.')
            .map_or(relative, |(stem, _)| stem)
            .replace('/', ".")
    }

    pub fn tensor(&mut self, relative: &str, x: &Tensor) -> Result<()> {
        io::write_tensor(self.target(relative)?, x)?;
        self.manifest
            .add_artifact(&Self::name_of(relative), relative);
        Ok(())
    }

    pub fn stacked(&mut self, relative: &str, xs: &[Tensor]) -> Result<()> {
        self.tensor(relative, &Tensor::stack(xs)?)
    }

    pub fn report(&mut self, relative: &str, report: &MetricsReport) -> Result<()> {
        io::write_report(self.target(relative)?, report)?;
        self.manifest
            .add_artifact(&Self::name_of(relative), relative);
        Ok(())
    }

    pub fn text(&mut self, relative: &str, text: &str) -> Result<()> {
        io::write_text(self.target(relative)?, text)?;
        self.manifest
            .add_artifact(&Self::name_of(relative), relative);
        Ok(())
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    /// Write the check table and the final manifest. Fails when a declared
    /// assertion does not hold and checks are enabled.
    pub fn finish(mut self) -> Result<()> {
        let mut csv = String::from("check,passed,detail\n");
        for c in &self.checks {
            csv.push_str(&format!(
                "{},{},\"{}\"\n",
                c.name,
                c.passed,
                c.detail.replace('"', "'")
            ));
        }
        self.text("checks.csv", &csv)?;
        let failed: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        let ok = failed.is_empty() || !self.enforce;
        let status = if failed.is_empty() {
            "ok"
        } else if ok {
            "ok-with-failed-checks"
        } else {
            "failed-checks"
        };
        self.manifest.set("status", status);
        self.manifest.write(self.root.join(MANIFEST), &self.root)?;
        for c in &self.checks {
            let mark = if c.passed { "ok" } else { "FAILED" };
            eprintln!("check {}: {mark} ({})", c.name, c.detail);
        }
        if !ok {
            bail!("declared checks failed: {}", failed.join(", "));
        }
        Ok(())
    }
}
