use std::path::{Path, PathBuf};

use diffrefine::dataset::{dataset_read, DatasetFile};
use diffrefine::hypotheses::{aggregate, average, best_of, AggregateMode, HypothesisSet};
use diffrefine::metrics::{evaluate, MetricReport};
use diffrefine::skeleton::{Camera, Pose2D, Pose3D};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Strategy};
use crate::error::{at_path, CliError, CliResult};
use crate::run_dir::{write_file, RunDir, StageName};

use super::{hypotheses_for, load_model, load_split};

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: usize,
    pub hypotheses: Vec<Vec<[f64; 3]>>,
    #[serde(rename = "final")]
    pub final_pose: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub strategy: Strategy,
    pub hypotheses: usize,
    pub iterations: usize,
    pub aggregate_mode: AggregateMode,
    pub input: String,
    pub metrics: MetricReport,
}

pub struct InferOutput {
    pub dir: PathBuf,
    pub report: InferReport,
    pub records: Vec<PredictionRecord>,
}

/// Combines a hypothesis set into the strategy's final pose.
pub fn combine(strategy: Strategy, hset: &HypothesisSet, x: &Pose2D, gt: &Pose3D, camera: &Camera, mode: AggregateMode) -> CliResult<Pose3D> {
    Ok(match strategy {
        Strategy::Single => hset.hypotheses[0].clone(),
        Strategy::Average => average(hset)?,
        Strategy::Aggregate => aggregate(hset, x, camera, mode)?,
        Strategy::BestOf => hset.hypotheses[best_of(hset, gt)?.0].clone(),
    })
}

/// Refines every sample of the configured split, or of `input` when given.
/// `single` keeps the first hypothesis, which is the pose an `H = 1` run
/// produces.
pub fn run(cfg: &RunConfig, run: &RunDir, input: Option<&Path>) -> CliResult<InferOutput> {
    let model = load_model(cfg, run, StageName::Refine)?;
    let (data, source, label_input) = match input {
        Some(p) => {
            let mut d = dataset_read(p).map_err(at_path(p))?;
            if cfg.infer.limit > 0 {
                d.samples.truncate(cfg.infer.limit);
            }
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
            (d, p.display().to_string(), stem)
        }
        None => {
            let d = load_split(run, cfg.infer.split, cfg.infer.limit)?;
            (d, cfg.infer.split.name().to_string(), cfg.infer.split.name().to_string())
        }
    };
    check_joints(&data, model.config.num_joints)?;
    let sched = cfg.schedule()?;
    let inf = &cfg.infer;
    let xs: Vec<&Pose2D> = data.samples.iter().map(|s| &s.noisy).collect();
    let y_bar = model.initial_predict(&xs)?;
    let sets = hypotheses_for(cfg, &model, &sched, &y_bar, &xs, inf.hypotheses, inf.iterations)?;
    let mut records = Vec::with_capacity(sets.len());
    let mut finals = Vec::with_capacity(sets.len());
    for (i, (hset, s)) in sets.iter().zip(&data.samples).enumerate() {
        let fin = combine(inf.strategy, hset, &s.noisy, &s.gt, &data.camera, inf.aggregate_mode)?;
        records.push(PredictionRecord {
            id: i,
            hypotheses: hset.hypotheses.iter().map(|p| p.joints().to_vec()).collect(),
            final_pose: fin.joints().to_vec(),
        });
        finals.push(fin);
    }
    let gts: Vec<Pose3D> = data.samples.iter().map(|s| s.gt.clone()).collect();
    let report = InferReport {
        strategy: inf.strategy,
        hypotheses: inf.hypotheses,
        iterations: inf.iterations,
        aggregate_mode: inf.aggregate_mode,
        input: source,
        metrics: evaluate(&finals, &gts, cfg.eval.pck_threshold)?,
    };
    let dir = run.infer_dir(&format!("{label_input}-{}-h{}-k{}", inf.strategy.name(), inf.hypotheses, inf.iterations));
    write_file(&dir.join("predictions.json"), serde_json::to_string(&records)?.as_bytes())?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    run.dump_config(&dir, "infer", cfg)?;
    Ok(InferOutput { dir, report, records })
}

pub fn check_joints(data: &DatasetFile, n: usize) -> CliResult<()> {
    if data.num_joints != n {
        return Err(CliError::data(format!("dataset has {} joints, the model expects {n}", data.num_joints)));
    }
    Ok(())
}

/// Reads a predictions file, checking each pose has `n` joints.
pub fn read_predictions(path: &Path, n: usize) -> CliResult<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(at_path(path))?;
    let records: Vec<PredictionRecord> = serde_json::from_str(&text).map_err(at_path(path))?;
    for r in &records {
        if r.final_pose.len() != n || r.hypotheses.iter().any(|h| h.len() != n) {
            return Err(CliError::data(format!("{}: record {} does not have {n} joints", path.display(), r.id)));
        }
    }
    Ok(records)
}
