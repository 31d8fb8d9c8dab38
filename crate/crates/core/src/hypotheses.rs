//! Multiple refinement hypotheses and the strategies that combine them.

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_timestep_plan, reverse_refine_batch, Denoiser, NoiseSchedule, Renoise, TimestepPlan};
use crate::error::{Error, Result};
use crate::metrics::mpjpe;
use crate::rng::RngStream;
use crate::skeleton::{project, Camera, Pose2D, Pose3D};

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Pose3D>,
    pub iterations: usize,
    pub base_seed: u64,
    pub plan: TimestepPlan,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Stream of hypothesis `h`.
pub fn hypothesis_stream(base_seed: u64, h: usize) -> RngStream {
    RngStream::new(base_seed, base_seed ^ h as u64)
}

/// Shared settings for hypothesis generation.
#[derive(Clone, Copy)]
pub struct HypothesisSpec<'a> {
    pub model: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
    pub count: usize,
    pub iterations: usize,
    pub t_start: usize,
    pub renoise: Renoise,
}

pub fn generate_hypotheses(y_bar: &Pose3D, x: &Pose2D, spec: &HypothesisSpec<'_>, base_seed: u64) -> Result<HypothesisSet> {
    Ok(generate_hypotheses_batch(&[y_bar], &[x], spec, &[base_seed], usize::MAX)?.remove(0))
}

/// Hypotheses for several samples, running up to `max_rows` refinement rows
/// per model call. Every row owns its stream, so grouping does not change the
/// result.
pub fn generate_hypotheses_batch(
    y_bar: &[&Pose3D],
    x: &[&Pose2D],
    spec: &HypothesisSpec<'_>,
    base_seeds: &[u64],
    max_rows: usize,
) -> Result<Vec<HypothesisSet>> {
    if spec.count < 1 {
        return Err(Error::invalid("hypothesis count H must be at least 1"));
    }
    if y_bar.len() != x.len() || y_bar.len() != base_seeds.len() {
        return Err(Error::invalid("hypothesis batch inputs differ in length"));
    }
    let plan = make_timestep_plan(spec.t_start, spec.iterations, spec.sched.timesteps())?;
    let h = spec.count;
    let rows: Vec<(usize, usize)> = (0..y_bar.len()).flat_map(|s| (0..h).map(move |k| (s, k))).collect();
    let mut poses = Vec::with_capacity(rows.len());
    let chunk = max_rows.max(1);
    for group in rows.chunks(chunk) {
        let yb: Vec<&Pose3D> = group.iter().map(|&(s, _)| y_bar[s]).collect();
        let xs: Vec<&Pose2D> = group.iter().map(|&(s, _)| x[s]).collect();
        let mut streams: Vec<RngStream> = group.iter().map(|&(s, k)| hypothesis_stream(base_seeds[s], k)).collect();
        let trace = reverse_refine_batch(&yb, &xs, spec.model, &plan, spec.sched, &mut streams, spec.renoise)?;
        poses.extend(trace.outputs);
    }
    let mut it = poses.into_iter();
    Ok(base_seeds
        .iter()
        .map(|&seed| HypothesisSet {
            hypotheses: it.by_ref().take(h).collect(),
            iterations: plan.len(),
            base_seed: seed,
            plan: plan.clone(),
        })
        .collect())
}

fn non_empty(hset: &HypothesisSet) -> Result<()> {
    if hset.is_empty() {
        return Err(Error::invalid("hypothesis set is empty"));
    }
    Ok(())
}

/// Element-wise mean of the hypotheses, re-rooted.
pub fn average(hset: &HypothesisSet) -> Result<Pose3D> {
    non_empty(hset)?;
    let n = hset.hypotheses[0].num_joints();
    let mut acc = vec![[0.0; 3]; n];
    for p in &hset.hypotheses {
        for (a, j) in acc.iter_mut().zip(p.joints()) {
            for c in 0..3 {
                a[c] += j[c];
            }
        }
    }
    let h = hset.len() as f64;
    Pose3D::from_rerooted(acc.into_iter().map(|a| a.map(|v| v / h)).collect())
}

/// How hypotheses are scored against the 2D input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateMode {
    /// Each joint comes from the hypothesis whose projection of that joint is
    /// closest to the 2D input.
    #[default]
    JointWise,
    /// The single hypothesis with the smallest mean reprojection distance.
    WholePose,
}

/// Reprojection distance of every joint of every hypothesis, `[h][i]`.
pub fn reprojection_distances(hset: &HypothesisSet, x: &Pose2D, camera: &Camera) -> Result<Vec<Vec<f64>>> {
    hset.hypotheses
        .iter()
        .map(|p| {
            if p.num_joints() != x.num_joints() {
                return Err(Error::invalid("hypothesis and 2D input differ in joint count"));
            }
            let proj = project(p, camera)?;
            Ok(proj.joints().iter().zip(x.joints()).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).collect())
        })
        .collect()
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    // Strict comparison keeps the lowest index on ties.
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Reprojection-based selection; ties go to the lowest hypothesis index.
pub fn aggregate(hset: &HypothesisSet, x: &Pose2D, camera: &Camera, mode: AggregateMode) -> Result<Pose3D> {
    non_empty(hset)?;
    let d = reprojection_distances(hset, x, camera)?;
    match mode {
        AggregateMode::JointWise => {
            let n = x.num_joints();
            let joints = (0..n).map(|i| hset.hypotheses[argmin(d.iter().map(|row| row[i]))].joints()[i]).collect();
            Pose3D::from_rerooted(joints)
        }
        AggregateMode::WholePose => {
            let h = argmin(d.iter().map(|row| row.iter().sum::<f64>()));
            Pose3D::from_rerooted(hset.hypotheses[h].joints().to_vec())
        }
    }
}

/// Oracle selection: index and MPJPE of the hypothesis closest to `gt`.
pub fn best_of(hset: &HypothesisSet, gt: &Pose3D) -> Result<(usize, f64)> {
    non_empty(hset)?;
    let errs = hset.hypotheses.iter().map(|p| mpjpe(p, gt)).collect::<Result<Vec<_>>>()?;
    let i = argmin(errs.iter().copied());
    Ok((i, errs[i]))
}
