//! The pipeline stages behind each subcommand.

pub mod eval;
pub mod gen_data;
pub mod infer;
pub mod train;

use std::thread;

use diffrefine::dataset::{dataset_read, DatasetFile};
use diffrefine::diffusion::NoiseSchedule;
use diffrefine::hypotheses::{generate_hypotheses_batch, HypothesisSet, HypothesisSpec};
use diffrefine::model::checkpoint::load_checkpoint_for;
use diffrefine::model::RefineModel;
use diffrefine::rng::mix;
use diffrefine::skeleton::{make_skeleton, Pose2D, Pose3D};

use crate::config::{RunConfig, SplitName};
use crate::error::{at_path, CliError, CliResult};
use crate::run_dir::{require, RunDir, StageName};

/// Reads one split, keeping the first `limit` samples (0 keeps all).
pub fn load_split(run: &RunDir, split: SplitName, limit: usize) -> CliResult<DatasetFile> {
    let path = run.dataset(split);
    require(&path, &format!("{} dataset", split.name()))?;
    let mut d = dataset_read(&path).map_err(at_path(&path))?;
    if d.num_joints != make_skeleton().num_joints() {
        return Err(CliError::data(format!("{}: dataset has {} joints, skeleton has 17", path.display(), d.num_joints)));
    }
    if limit > 0 {
        d.samples.truncate(limit);
    }
    if d.samples.is_empty() {
        return Err(CliError::data(format!("{}: no samples", path.display())));
    }
    Ok(d)
}

/// The trained model of `stage`, checked against the configured architecture.
pub fn load_model(cfg: &RunConfig, run: &RunDir, stage: StageName) -> CliResult<RefineModel> {
    let path = run.checkpoint(stage);
    require(&path, &format!("{} checkpoint", stage.name()))?;
    let ck = load_checkpoint_for(&path, &cfg.model).map_err(at_path(&path))?;
    Ok(RefineModel::new(ck.config, ck.params, ck.norm, &make_skeleton())?)
}

/// Per-sample base seed for hypothesis generation.
pub fn sample_seed(seed: u64, id: usize) -> u64 {
    mix(&[seed, 0x4e7f, id as u64])
}

/// Hypothesis sets for every sample, split across `cfg.threads` workers.
/// Each sample owns its streams, so the result does not depend on the split.
pub fn hypotheses_for(
    cfg: &RunConfig,
    model: &RefineModel,
    sched: &NoiseSchedule,
    y_bar: &[Pose3D],
    xs: &[&Pose2D],
    count: usize,
    iterations: usize,
) -> CliResult<Vec<HypothesisSet>> {
    let n = y_bar.len();
    let seeds: Vec<u64> = (0..n).map(|i| sample_seed(cfg.seed, i)).collect();
    let chunk = n.div_ceil(cfg.threads.max(1)).max(1);
    let run_chunk = |start: usize| -> CliResult<Vec<HypothesisSet>> {
        let end = (start + chunk).min(n);
        let spec = HypothesisSpec {
            model,
            sched,
            count,
            iterations,
            t_start: cfg.diffusion.start_timestep,
            renoise: cfg.diffusion.renoise,
        };
        let yb: Vec<&Pose3D> = y_bar[start..end].iter().collect();
        Ok(generate_hypotheses_batch(&yb, &xs[start..end], &spec, &seeds[start..end], cfg.infer.max_rows)?)
    };
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    if starts.len() <= 1 {
        return run_chunk(0);
    }
    let parts: Vec<CliResult<Vec<HypothesisSet>>> = thread::scope(|s| {
        let handles: Vec<_> = starts.iter().map(|&st| s.spawn(move || run_chunk(st))).collect();
        handles.into_iter().map(|h| h.join().expect("hypothesis worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
