//! Layout of a run directory: datasets, checkpoints, logs and command outputs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, SplitName};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

/// Training stage as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StageName {
    Pretrain,
    Refine,
}

impl StageName {
    pub fn name(self) -> &'static str {
        match self {
            StageName::Pretrain => "pretrain",
            StageName::Refine => "refine",
        }
    }
}

impl RunDir {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// A fresh `<runs_dir>/<timestamp>-seed<seed>` directory.
    pub fn create_new(runs_dir: &Path, seed: u64) -> CliResult<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
        let root = runs_dir.join(format!("{stamp}-seed{seed}"));
        Ok(Self { root })
    }

    /// The most recent run directory for `seed` under `runs_dir`.
    pub fn latest(runs_dir: &Path, seed: u64) -> CliResult<Self> {
        let suffix = format!("-seed{seed}");
        let entries = fs::read_dir(runs_dir).map_err(|e| CliError::data(format!("{}: {e}", runs_dir.display())))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(&suffix))
            .collect();
        names.sort();
        let last = names
            .pop()
            .ok_or_else(|| CliError::data(format!("no run directory for seed {seed} under {}", runs_dir.display())))?;
        Ok(Self { root: runs_dir.join(last) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset(&self, split: SplitName) -> PathBuf {
        self.root.join("data").join(format!("{}.drpz", split.name()))
    }

    pub fn checkpoint(&self, stage: StageName) -> PathBuf {
        let name = match stage {
            StageName::Pretrain => "initial.ckpt",
            StageName::Refine => "refine.ckpt",
        };
        self.root.join("checkpoints").join(name)
    }

    pub fn train_log(&self, stage: StageName) -> PathBuf {
        self.root.join("logs").join(format!("{}.log", stage.name()))
    }

    pub fn infer_dir(&self, label: &str) -> PathBuf {
        self.root.join("infer").join(label)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn dump_config(&self, dir: &Path, command: &str, cfg: &RunConfig) -> CliResult<PathBuf> {
        let path = dir.join(format!("{command}.config.toml"));
        write_file(&path, cfg.to_toml().as_bytes())?;
        Ok(path)
    }
}

pub fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{what} not found at {}", path.display())))
    }
}
