//! Cosine noise schedule, forward diffusion, the Gaussian posterior step and
//! the reverse refinement loop.
//!
//! The denoiser predicts the clean pose directly. Between planned timesteps
//! the chain is re-noised either from the marginal `q(y_s | ŷ0)` or from the
//! posterior `q(y_s | y_t, ŷ0)`; both reduce to the standard one-step posterior
//! when the gap is a single step.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::skeleton::{Pose2D, Pose3D};
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_START_TIMESTEP: usize = 200;
pub const MAX_BETA: f64 = 0.999;

/// Per-timestep coefficients. Index 0 is the clean row (`ᾱ₀ = 1`); the
/// diffusion steps are `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    offset: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

pub fn build_cosine_schedule(timesteps: usize, offset: f64) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(offset > 0.0) || !offset.is_finite() {
        return Err(Error::invalid(format!("cosine offset must be positive, got {offset}")));
    }
    let f = |t: usize| {
        let x = (t as f64 / timesteps as f64 + offset) / (1.0 + offset) * FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut beta = vec![0.0; timesteps + 1];
    let mut alpha = vec![1.0; timesteps + 1];
    let mut alpha_bar = vec![1.0; timesteps + 1];
    let mut sigma2 = vec![0.0; timesteps + 1];
    for t in 1..=timesteps {
        let target = f(t) / f0;
        let raw = 1.0 - target / alpha_bar[t - 1];
        if raw > MAX_BETA {
            beta[t] = MAX_BETA;
            alpha[t] = 1.0 - MAX_BETA;
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        } else {
            // keep ᾱ on the closed form; α is whatever ratio reproduces it
            alpha_bar[t] = target;
            alpha[t] = target / alpha_bar[t - 1];
            beta[t] = 1.0 - alpha[t];
        }
        sigma2[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
    }
    let sched = NoiseSchedule { timesteps, offset, beta, alpha, alpha_bar, sigma2 };
    sched.check()?;
    Ok(sched)
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    fn check(&self) -> Result<()> {
        for t in 1..=self.timesteps {
            let b = self.beta[t];
            if !(b > 0.0 && b <= MAX_BETA) {
                return Err(Error::invalid(format!("beta[{t}] = {b} outside (0, {MAX_BETA}]")));
            }
            if !(self.alpha_bar[t] < self.alpha_bar[t - 1]) {
                return Err(Error::invalid(format!("alpha_bar not decreasing at t={t}")));
            }
        }
        Ok(())
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.timesteps {
            return Err(Error::invalid(format!(
                "timestep {t} outside [{lo}, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// Plain-text table, one row per timestep.
    pub fn dump_table(&self) -> String {
        let mut s = String::from("t, beta, alpha_bar, sigma2\n");
        for t in 1..=self.timesteps {
            let _ = writeln!(
                s,
                "{t}, {:.17e}, {:.17e}, {:.17e}",
                self.beta[t], self.alpha_bar[t], self.sigma2[t]
            );
        }
        s
    }
}

/// `√ᾱₜ·y₀ + √(1−ᾱₜ)·ε`. `t = 0` selects the clean row and returns `y₀`.
pub fn forward_diffuse(y0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    if y0.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "noise shape {:?} differs from pose shape {:?}",
            eps.shape(),
            y0.shape()
        )));
    }
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(y0.zip_map(eps, |y, e| a * y + b * e))
}

/// Which coefficient multiplies `yₜ` in the posterior mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PosteriorMean {
    /// `√αₜ(1−ᾱₜ₋₁)/(1−ᾱₜ)`, the mean of `q(yₜ₋₁ | yₜ, y₀)`.
    #[default]
    StepAlpha,
    /// `√ᾱₜ(1−ᾱₜ₋₁)/(1−ᾱₜ)`. Kept only to demonstrate that it does not
    /// reproduce the posterior; never used by the sampler.
    CumulativeAlpha,
}

/// Coefficients `(c_yt, c_y0)` of the posterior mean from `t` back to `s < t`.
pub fn posterior_coefficients(sched: &NoiseSchedule, t: usize, s: usize, variant: PosteriorMean) -> (f64, f64) {
    let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
    let alpha_ts = ab_t / ab_s;
    let c_yt = match variant {
        PosteriorMean::StepAlpha => alpha_ts.sqrt(),
        PosteriorMean::CumulativeAlpha => ab_t.sqrt(),
    } * (1.0 - ab_s)
        / (1.0 - ab_t);
    let c_y0 = ab_s.sqrt() * (1.0 - alpha_ts) / (1.0 - ab_t);
    (c_yt, c_y0)
}

/// Posterior variance from `t` back to `s < t`.
pub fn posterior_variance(sched: &NoiseSchedule, t: usize, s: usize) -> f64 {
    let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
    (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)
}

/// One reverse step `t → t−1`: the posterior mean plus `σₜ·z` when a stream is
/// given. At `t = 1` the variance is zero and the mean equals `ŷ₀`.
pub fn posterior_step(
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    stream: Option<&mut RngStream>,
) -> Result<Tensor> {
    sched.check_t(t, 1)?;
    posterior_step_to(y_t, y0_hat, t, t - 1, sched, stream)
}

/// Reverse jump `t → s` for any `0 ≤ s < t`.
pub fn posterior_step_to(
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
    stream: Option<&mut RngStream>,
) -> Result<Tensor> {
    posterior_step_with(y_t, y0_hat, t, s, sched, stream, PosteriorMean::StepAlpha)
}

pub fn posterior_step_with(
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
    stream: Option<&mut RngStream>,
    variant: PosteriorMean,
) -> Result<Tensor> {
    sched.check_t(t, 1)?;
    if s >= t {
        return Err(Error::invalid(format!("posterior target {s} must precede {t}")));
    }
    if y_t.shape() != y0_hat.shape() {
        return Err(Error::invalid("posterior inputs differ in shape"));
    }
    let (c_yt, c_y0) = posterior_coefficients(sched, t, s, variant);
    let mean = y_t.zip_map(y0_hat, |a, b| c_yt * a + c_y0 * b);
    let var = posterior_variance(sched, t, s);
    match stream {
        Some(stream) if var > 0.0 => {
            let sd = var.sqrt();
            let z = stream.gaussian(mean.shape());
            Ok(mean.zip_map(&z, |m, z| m + sd * z))
        }
        _ => Ok(mean),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn t_start(&self) -> usize {
        self.steps[0]
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `K` evenly spaced timesteps `round(t_start·(K−i)/K)`, `i = 0..K`. The last
/// planned step denoises straight to `ŷ₀`. `K` is capped at `t_start`.
pub fn make_timestep_plan(t_start: usize, iterations: usize, timesteps: usize) -> Result<TimestepPlan> {
    if iterations < 1 {
        return Err(Error::invalid("iteration count K must be at least 1"));
    }
    if t_start < 1 || t_start > timesteps {
        return Err(Error::invalid(format!("start timestep {t_start} outside [1, {timesteps}]")));
    }
    let k = if iterations > t_start {
        log::warn!("K={iterations} exceeds start timestep {t_start}; using K={t_start}");
        t_start
    } else {
        iterations
    };
    let steps = (0..k)
        .map(|i| ((t_start * (k - i)) as f64 / k as f64).round() as usize)
        .collect::<Vec<_>>();
    debug_assert!(steps.windows(2).all(|w| w[0] > w[1]));
    Ok(TimestepPlan { steps })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Renoise {
    /// `y_s = √ᾱ_s·ŷ₀ + √(1−ᾱ_s)·z`.
    #[default]
    Marginal,
    /// Sample `q(y_s | y_t, ŷ₀)`.
    Posterior,
}

/// Maps between pixel/millimeter poses and the network's input space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub cx: f64,
    pub cy: f64,
    /// Pixels per unit of normalized 2D input.
    pub half_width: f64,
    /// Millimeters per unit of model-space 3D pose.
    pub pose_scale: f64,
}

/// Default model-space unit (10 m). Poses then span a few hundredths of a
/// unit, so at the starting timestep the noisy pose is dominated by noise in
/// training just as the pure-noise start is at inference.
pub const DEFAULT_POSE_SCALE: f64 = 10_000.0;

impl InputNormalization {
    pub fn for_camera(camera: &crate::skeleton::Camera) -> Self {
        Self { cx: camera.cx, cy: camera.cy, half_width: camera.cx, pose_scale: DEFAULT_POSE_SCALE }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.half_width, self.pose_scale]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { cx: a[0], cy: a[1], half_width: a[2], pose_scale: a[3] }
    }

    pub fn pose_2d(&self, poses: &[&Pose2D]) -> Tensor {
        let n = poses[0].num_joints();
        let data = poses
            .iter()
            .flat_map(|p| p.joints().iter())
            .flat_map(|[u, v]| [(u - self.cx) / self.half_width, (v - self.cy) / self.half_width])
            .collect();
        Tensor::from_parts(vec![poses.len(), n, 2], data)
    }

    pub fn pose_3d(&self, poses: &[&Pose3D]) -> Tensor {
        let n = poses[0].num_joints();
        let data = poses
            .iter()
            .flat_map(|p| p.joints().iter().flatten())
            .map(|c| c / self.pose_scale)
            .collect();
        Tensor::from_parts(vec![poses.len(), n, 3], data)
    }

    /// Splits a `[B,N,3]` model-space batch into re-rooted millimeter poses.
    pub fn unpose_3d(&self, batch: &Tensor) -> Result<Vec<Pose3D>> {
        let n = batch.shape()[1];
        batch
            .data()
            .chunks(n * 3)
            .map(|chunk| {
                Pose3D::from_rerooted(
                    chunk
                        .chunks(3)
                        .map(|c| [c[0] * self.pose_scale, c[1] * self.pose_scale, c[2] * self.pose_scale])
                        .collect(),
                )
            })
            .collect()
    }
}

/// A network that predicts clean poses from `[ȳ, yₜ]` conditioned on the 2D
/// pose and timestep. All tensors are in model space: `y_bar`, `y_t` are
/// `[B,N,3]`, `x` is `[B,N,2]`, and `t` has one timestep per batch row.
pub trait Denoiser {
    fn normalization(&self) -> InputNormalization;

    fn denoise(&self, y_bar: &Tensor, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// Intermediate noisy states `y_t` entering each planned model call.
#[derive(Clone, Debug)]
pub struct RefineTrace {
    pub states: Vec<Tensor>,
    pub outputs: Vec<Pose3D>,
}

/// Batched reverse refinement. Row `b` draws every random number from
/// `streams[b]`, so results do not depend on how rows are batched.
pub fn reverse_refine_batch(
    y_bar: &[&Pose3D],
    x: &[&Pose2D],
    model: &dyn Denoiser,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    streams: &mut [RngStream],
    renoise: Renoise,
) -> Result<RefineTrace> {
    let batch = y_bar.len();
    if batch == 0 {
        return Ok(RefineTrace { states: vec![], outputs: vec![] });
    }
    if x.len() != batch || streams.len() != batch {
        return Err(Error::invalid("reverse_refine batch inputs differ in length"));
    }
    for &t in plan.steps() {
        sched.check_t(t, 1)?;
    }
    let norm = model.normalization();
    let n = y_bar[0].num_joints();
    let ybar = norm.pose_3d(y_bar);
    let xs = norm.pose_2d(x);
    let noise: Vec<f64> = streams.iter_mut().flat_map(|s| s.gaussian(&[n, 3]).into_data()).collect();
    let mut y_t = Tensor::from_parts(vec![batch, n, 3], noise);
    let mut states = Vec::with_capacity(plan.len());
    let mut y0_hat = None;
    for (i, &t) in plan.steps().iter().enumerate() {
        states.push(y_t.clone());
        let pred = model.denoise(&ybar, &y_t, &xs, &vec![t; batch])?;
        if let Some(&next) = plan.steps().get(i + 1) {
            y_t = renoise_batch(&y_t, &pred, t, next, sched, streams, renoise)?;
        }
        y0_hat = Some(pred);
    }
    let outputs = norm.unpose_3d(&y0_hat.expect("plan is non-empty"))?;
    Ok(RefineTrace { states, outputs })
}

fn renoise_batch(
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    next: usize,
    sched: &NoiseSchedule,
    streams: &mut [RngStream],
    mode: Renoise,
) -> Result<Tensor> {
    let row = y_t.numel() / streams.len();
    let mut out = Vec::with_capacity(y_t.numel());
    for (b, stream) in streams.iter_mut().enumerate() {
        let shape = [row];
        let yt_b = Tensor::from_parts(shape.to_vec(), y_t.data()[b * row..(b + 1) * row].to_vec());
        let y0_b = Tensor::from_parts(shape.to_vec(), y0_hat.data()[b * row..(b + 1) * row].to_vec());
        let next_b = match mode {
            Renoise::Marginal => {
                let eps = stream.gaussian(&shape);
                forward_diffuse(&y0_b, next, &eps, sched)?
            }
            Renoise::Posterior => posterior_step_to(&yt_b, &y0_b, t, next, sched, Some(stream))?,
        };
        out.extend(next_b.into_data());
    }
    Ok(Tensor::from_parts(y_t.shape().to_vec(), out))
}

/// Single-pose reverse refinement: pure noise at `plan[0]`, one model call per
/// planned timestep, re-noising between calls; returns the re-rooted final `ŷ₀`.
pub fn reverse_refine(
    y_bar: &Pose3D,
    x: &Pose2D,
    model: &dyn Denoiser,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    stream: &mut RngStream,
    renoise: Renoise,
) -> Result<Pose3D> {
    let mut streams = [stream.clone()];
    let trace = reverse_refine_batch(&[y_bar], &[x], model, plan, sched, &mut streams, renoise)?;
    *stream = streams[0].clone();
    Ok(trace.outputs.into_iter().next().expect("one output per row"))
}
