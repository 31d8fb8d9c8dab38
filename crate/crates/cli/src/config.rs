//! Run configuration: one TOML file with a section per pipeline stage.
//! Values merge as defaults, then the file, then `--set key=value` and
//! dedicated flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use diffrefine::diffusion::{
    build_cosine_schedule, InputNormalization, NoiseSchedule, Renoise, DEFAULT_COSINE_OFFSET, DEFAULT_POSE_SCALE,
    DEFAULT_START_TIMESTEP, DEFAULT_TIMESTEPS,
};
use diffrefine::hypotheses::AggregateMode;
use diffrefine::metrics::DEFAULT_PCK_THRESHOLD;
use diffrefine::model::ModelConfig;
use diffrefine::skeleton::{make_skeleton, Camera, PoseGenConfig};
use diffrefine::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for data, initialization, training and sampling.
    pub seed: u64,
    /// Worker threads for hypothesis generation.
    pub threads: usize,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    /// Initial lifter training.
    pub pretrain: TrainConfig,
    /// Refinement network training.
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Parent of the timestamped run directories.
    pub runs_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { runs_dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Standard deviation of simulated detector noise, pixels.
    pub detector_sigma: f64,
    pub camera: Camera,
    pub pose: PoseGenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 20_000,
            val_samples: 5_000,
            test_samples: 5_000,
            detector_sigma: 3.0,
            camera: Camera::default(),
            pose: PoseGenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub cosine_offset: f64,
    /// Timestep the reverse chain starts from.
    pub start_timestep: usize,
    /// How the chain is re-noised between planned steps.
    pub renoise: Renoise,
    /// Millimeters per model-space unit.
    pub pose_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            start_timestep: DEFAULT_START_TIMESTEP,
            renoise: Renoise::Marginal,
            pose_scale: DEFAULT_POSE_SCALE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// First hypothesis.
    #[default]
    Single,
    Average,
    Aggregate,
    /// Hypothesis closest to the ground truth.
    BestOf,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Single, Strategy::Average, Strategy::Aggregate, Strategy::BestOf];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::Average => "average",
            Strategy::Aggregate => "aggregate",
            Strategy::BestOf => "best-of",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub strategy: Strategy,
    /// Hypotheses per sample (H).
    pub hypotheses: usize,
    /// Reverse iterations per hypothesis (K).
    pub iterations: usize,
    pub aggregate_mode: AggregateMode,
    pub split: SplitName,
    /// Samples to process; 0 takes the whole split.
    pub limit: usize,
    /// Refinement rows per network call.
    pub max_rows: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Single,
            hypotheses: 1,
            iterations: 1,
            aggregate_mode: AggregateMode::JointWise,
            split: SplitName::Test,
            limit: 0,
            max_rows: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitName,
    /// Samples to score; 0 takes the whole split.
    pub limit: usize,
    pub pck_threshold: f64,
    /// H values of the strategy grid.
    pub hypotheses: Vec<usize>,
    /// K values of the strategy grid.
    pub iterations: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: SplitName::Test,
            limit: 0,
            pck_threshold: DEFAULT_PCK_THRESHOLD,
            hypotheses: vec![1, 10],
            iterations: vec![1, 5],
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::usage(msg)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults) and applies `overrides`, each a
    /// `dotted.key=value` pair whose value is parsed as TOML, falling back to
    /// a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
                text.parse().map_err(|e| bad(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(bad("threads must be at least 1"));
        }
        let d = &self.data;
        if d.train_samples == 0 {
            return Err(bad("data.train_samples must be at least 1"));
        }
        if !(d.detector_sigma >= 0.0) || !d.detector_sigma.is_finite() {
            return Err(bad(format!("data.detector_sigma must be >= 0, got {}", d.detector_sigma)));
        }
        d.camera.validate()?;
        let skeleton = make_skeleton();
        d.pose.validate(&skeleton)?;
        let f = &self.diffusion;
        build_cosine_schedule(f.timesteps, f.cosine_offset)?;
        if f.start_timestep == 0 || f.start_timestep > f.timesteps {
            return Err(bad(format!("diffusion.start_timestep must lie in [1, {}], got {}", f.timesteps, f.start_timestep)));
        }
        if !(f.pose_scale > 0.0) || !f.pose_scale.is_finite() {
            return Err(bad(format!("diffusion.pose_scale must be positive, got {}", f.pose_scale)));
        }
        self.model.validate()?;
        if self.model.num_joints != skeleton.num_joints() {
            return Err(bad(format!(
                "model.num_joints is {}, the skeleton has {} joints",
                self.model.num_joints,
                skeleton.num_joints()
            )));
        }
        self.pretrain_config().validate(skeleton.num_joints())?;
        self.train_config().validate(skeleton.num_joints())?;
        let i = &self.infer;
        if i.hypotheses == 0 || i.iterations == 0 || i.max_rows == 0 {
            return Err(bad("infer.hypotheses, iterations and max_rows must be at least 1"));
        }
        let e = &self.eval;
        if e.hypotheses.is_empty() || e.iterations.is_empty() || e.hypotheses.contains(&0) || e.iterations.contains(&0) {
            return Err(bad("eval.hypotheses and eval.iterations must be non-empty lists of positive counts"));
        }
        if !(e.pck_threshold > 0.0) {
            return Err(bad(format!("eval.pck_threshold must be positive, got {}", e.pck_threshold)));
        }
        Ok(())
    }

    fn stage_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig { seed: self.seed, timesteps: self.diffusion.timesteps, ..base.clone() }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.stage_config(&self.pretrain)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.stage_config(&self.train)
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(build_cosine_schedule(self.diffusion.timesteps, self.diffusion.cosine_offset)?)
    }

    pub fn normalization(&self, camera: &Camera) -> InputNormalization {
        InputNormalization { pose_scale: self.diffusion.pose_scale, ..InputNormalization::for_camera(camera) }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("override `{assignment}` is not of the form key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| bad(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Every configuration key with its default, one `key = value` per line.
pub fn describe_keys() -> String {
    let value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut out = String::new();
    flatten("", &value, &mut out);
    out
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::Array(a) if a.iter().any(|e| e.is_table()) => {
            for (i, e) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), e, out);
            }
        }
        other => {
            let _ = writeln!(out, "  {prefix} = {other}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml("[data.camera]\nfocal = 3.0").is_err());
    }

    #[test]
    fn overrides_parse_as_toml() {
        let cfg = RunConfig::load(None, &["train.epochs=3".into(), "infer.strategy=best-of".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.infer.strategy, Strategy::BestOf);
        assert!(RunConfig::load(None, &["train.epochs".into()]).is_err());
        assert!(RunConfig::load(None, &["train.batch_size=0".into()]).is_err());
    }

    #[test]
    fn key_listing_covers_nested_sections() {
        let keys = describe_keys();
        for k in ["seed = 0", "diffusion.start_timestep = 200", "train.base_lr = 0.0005", "data.camera.fx = 1000.0"] {
            assert!(keys.contains(k), "missing {k}");
        }
        assert!(keys.contains("data.pose.bones[16].length"));
    }
}
