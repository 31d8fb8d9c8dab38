//! Optimization of the initial lifter and the refinement network.
//!
//! Both stages minimize the joint-weighted Euclidean error in millimeters with
//! Adam. Refinement training draws `t` uniformly per sample, diffuses the
//! ground truth to `y_t` and asks the network for `ŷ₀`. The initial lifter is
//! frozen during that stage and its outputs are computed once up front.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::diffusion::{
    make_timestep_plan, reverse_refine_batch, InputNormalization, NoiseSchedule, Renoise, DEFAULT_START_TIMESTEP,
};
use crate::error::{Error, Result};
use crate::graph::{value_and_grad, Bindings, Graph, Gradients, NodeId};
use crate::metrics::mean_mpjpe;
use crate::model::{build_initial, build_refine, sinusoidal_features, RefineInputs, RefineModel};
use crate::model::{ModelParams, INITIAL_PREFIX, REFINE_PREFIXES};
use crate::rng::{mix, RngStream};
use crate::skeleton::{Pose2D, Pose3D, NUM_JOINTS};
use crate::tensor::Tensor;

/// Smoothing term of the per-joint norm, in millimeters.
pub const NORM_EPS: f64 = 1e-8;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Multiplier applied after every epoch.
    pub epoch_decay: f64,
    /// Extra multiplier applied every `decay_period` epochs.
    pub period_decay: f64,
    pub decay_period: usize,
    /// Diffusion steps; a run configuration sets this from its schedule.
    #[serde(skip)]
    pub timesteps: usize,
    /// Per-joint loss weights.
    pub joint_weights: Vec<f64>,
    /// Set from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
    /// Validation samples scored after each epoch (0 scores all of them).
    pub val_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 512,
            base_lr: 5e-4,
            epoch_decay: 0.95,
            period_decay: 0.5,
            decay_period: 5,
            timesteps: 1000,
            joint_weights: vec![1.0; NUM_JOINTS],
            seed: 0,
            val_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        let rates = [
            ("base_lr", self.base_lr),
            ("epoch_decay", self.epoch_decay),
            ("period_decay", self.period_decay),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.decay_period == 0 || self.timesteps == 0 {
            return Err(Error::invalid("train.batch_size, decay_period and timesteps must be at least 1"));
        }
        if self.joint_weights.len() != num_joints {
            return Err(Error::invalid(format!(
                "train.joint_weights has {} entries, skeleton has {num_joints} joints",
                self.joint_weights.len()
            )));
        }
        if let Some(w) = self.joint_weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("joint weights must be non-negative, found {w}")));
        }
        Ok(())
    }
}

/// `base_lr · epoch_decay^e · period_decay^⌊e / decay_period⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.epoch_decay.powi(epoch as i32) * cfg.period_decay.powi((epoch / cfg.decay_period) as i32)
}

/// Adam moments for every parameter, plus progress counters used for resuming.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub epochs_done: u32,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = ModelParams::from_map(params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect());
        Self { step: 0, epochs_done: 0, m: zeros.clone(), v: zeros }
    }

    /// Moments must mirror the parameters name for name and shape for shape.
    pub fn check_matches(&self, params: &ModelParams) -> Result<()> {
        for (label, moments) in [("m", &self.m), ("v", &self.v)] {
            if moments.len() != params.len() {
                return Err(Error::Checkpoint(format!(
                    "{label} holds {} tensors, parameters {}",
                    moments.len(),
                    params.len()
                )));
            }
            for (name, p) in params.iter() {
                match moments.get(name) {
                    Some(t) if t.shape() == p.shape() => {}
                    Some(t) => {
                        return Err(Error::Checkpoint(format!(
                            "{label}.{name} has shape {:?}, parameter has {:?}",
                            t.shape(),
                            p.shape()
                        )))
                    }
                    None => return Err(Error::Checkpoint(format!("missing {label}.{name}"))),
                }
            }
        }
        Ok(())
    }

    /// One Adam update of every parameter that has a gradient.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, g) in grads {
            let missing = || Error::invalid(format!("no optimizer slot for `{name}`"));
            let p = params.get_mut(name).ok_or_else(missing)?;
            let m = self.m.get_mut(name).ok_or_else(missing)?;
            let v = self.v.get_mut(name).ok_or_else(missing)?;
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Loss nodes for `[B,N,3]` predictions against `[B,N,3]` targets, both in
/// model units; `scale` converts to millimeters.
pub fn weighted_loss_node(g: &mut Graph, pred: NodeId, target: NodeId, weights: &[f64], scale: f64, batch: usize) -> NodeId {
    let n = weights.len();
    let diff = g.sub(pred, target);
    let diff = g.scale(diff, scale);
    let sq = g.mul(diff, diff);
    let sq = g.sum(sq, Some(2));
    let eps = g.constant(Tensor::full(&[batch, n], NORM_EPS * NORM_EPS));
    let sq = g.add(sq, eps);
    let norm = g.sqrt(sq);
    let w = g.constant(Tensor::from_vec(weights.to_vec()));
    let w = g.broadcast(w, &[batch, n]);
    let weighted = g.mul(norm, w);
    g.mean(weighted, None)
}

/// `(1/N)·Σᵢ λᵢ·√(‖ŷᵢ − yᵢ‖² + ε²)`, averaged over the batch. Inputs are
/// `[B,N,3]` tensors in millimeters.
pub fn weighted_loss(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() != 3 || pred.shape()[2] != 3 || pred.shape()[1] != weights.len() {
        return Err(Error::invalid(format!(
            "weighted_loss: shapes {:?} and {:?} with {} weights",
            pred.shape(),
            target.shape(),
            weights.len()
        )));
    }
    let (b, n) = (pred.shape()[0], weights.len());
    let mut total = 0.0;
    for (row, (p, t)) in pred.data().chunks(3).zip(target.data().chunks(3)).enumerate() {
        let sq: f64 = p.iter().zip(t).map(|(a, c)| (a - c) * (a - c)).sum();
        total += weights[row % n] * (sq + NORM_EPS * NORM_EPS).sqrt();
    }
    Ok(total / (b * n) as f64)
}

/// One training batch in model space.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// Ground truth `[B,N,3]`.
    pub y0: Tensor,
    /// Normalized noisy 2D input `[B,N,2]`.
    pub x: Tensor,
    /// Frozen initial prediction `[B,N,3]`.
    pub y_bar: Tensor,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.y0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_loss(loss: f64, batch_index: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss { batch: batch_index, value: loss })
    }
}

/// One refinement update: per-sample `t ~ U[1, T]`, `y_t` from the forward
/// process, loss on the network's `ŷ₀`, one Adam step. Returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut RefineModel,
    opt: &mut OptimizerState,
    batch: &TrainBatch,
    sched: &NoiseSchedule,
    stream: &mut RngStream,
    cfg: &TrainConfig,
    lr: f64,
    batch_index: usize,
) -> Result<f64> {
    let b = batch.len();
    let n = model.config.num_joints;
    let ts: Vec<usize> = (0..b).map(|_| stream.int_inclusive(1, sched.timesteps())).collect();
    let eps = stream.gaussian(&[b, n, 3]);
    let row = n * 3;
    let mut y_t = Vec::with_capacity(b * row);
    for (i, &t) in ts.iter().enumerate() {
        let (ca, cb) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let y0 = &batch.y0.data()[i * row..(i + 1) * row];
        let e = &eps.data()[i * row..(i + 1) * row];
        y_t.extend(y0.iter().zip(e).map(|(y, z)| ca * y + cb * z));
    }
    let y_t = Tensor::new(vec![b, n, 3], y_t)?;
    let tsin = sinusoidal_features(&ts, model.config.time_dim);

    let mut graph = Graph::new();
    let loss = {
        let mut c = model.ctx(&mut graph, b);
        let inputs = RefineInputs::declare(c.g);
        let pred = build_refine(&mut c, &inputs);
        let target = c.g.input("y0");
        weighted_loss_node(c.g, pred, target, &cfg.joint_weights, model.norm.pose_scale, b)
    };
    let (value, grads) = {
        let mut bind = Bindings::new();
        model.params.bind(&mut bind);
        bind.bind("y_bar", &batch.y_bar).bind("y_t", &y_t).bind("x2d", &batch.x).bind("tsin", &tsin).bind("y0", &batch.y0);
        let (eval, grads) = value_and_grad(&graph, loss, &bind)?;
        (check_loss(eval.value(loss).data()[0], batch_index)?, grads)
    };
    opt.apply(&mut model.params, &grads, lr)?;
    Ok(value)
}

/// One update of the initial lifter on `(x → y₀)` with all-ones weights.
pub fn initial_step(
    model: &mut RefineModel,
    opt: &mut OptimizerState,
    batch: &TrainBatch,
    lr: f64,
    batch_index: usize,
) -> Result<f64> {
    let b = batch.len();
    let weights = vec![1.0; model.config.num_joints];
    let mut graph = Graph::new();
    let loss = {
        let mut c = model.ctx(&mut graph, b);
        let x = c.g.input("x2d");
        let pred = build_initial(&mut c, x);
        let target = c.g.input("y0");
        weighted_loss_node(c.g, pred, target, &weights, model.norm.pose_scale, b)
    };
    let mut bind = Bindings::new();
    model.params.bind(&mut bind);
    bind.bind("x2d", &batch.x).bind("y0", &batch.y0);
    let (eval, grads) = value_and_grad(&graph, loss, &bind)?;
    let value = check_loss(eval.value(loss).data()[0], batch_index)?;
    drop(bind);
    opt.apply(&mut model.params, &grads, lr)?;
    Ok(value)
}

/// Per-epoch record, printed as `epoch, lr, mean_loss, val_mpjpe`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_mpjpe: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {:.6e}, {:.6}, {:.4}", self.epoch, self.lr, self.mean_loss, self.val_mpjpe)
    }
}

/// Called after every epoch with the log line, the model and the optimizer.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, &RefineModel, &OptimizerState) -> Result<()> + 'a;

/// Which network a training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Refine,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Initial => 0x1a17,
            Stage::Refine => 0x2ef1,
        }
    }

    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Initial => std::slice::from_ref(&INITIAL_PREFIX),
            Stage::Refine => &REFINE_PREFIXES,
        }
    }
}

/// Model-space tensors for a set of samples.
pub struct Prepared {
    pub y0: Tensor,
    pub x: Tensor,
    pub y_bar: Option<Tensor>,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_parts(shape, data)
}

fn prepare(samples: &[Sample], norm: &InputNormalization) -> Prepared {
    let gts: Vec<&Pose3D> = samples.iter().map(|s| &s.gt).collect();
    let xs: Vec<&Pose2D> = samples.iter().map(|s| &s.noisy).collect();
    Prepared { y0: norm.pose_3d(&gts), x: norm.pose_2d(&xs), y_bar: None }
}

/// Initial-lifter outputs for every sample, computed in chunks.
pub fn initial_outputs(model: &RefineModel, x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let mut data = Vec::with_capacity(b * model.config.num_joints * 3);
    for start in (0..b).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(b)).collect();
        data.extend(model.initial_forward(&gather_rows(x, &idx))?.into_data());
    }
    Tensor::new(vec![b, model.config.num_joints, 3], data)
}

fn val_subset<'a>(val: &'a [Sample], cfg: &TrainConfig) -> &'a [Sample] {
    if cfg.val_limit == 0 {
        val
    } else {
        &val[..cfg.val_limit.min(val.len())]
    }
}

/// Validation MPJPE of the initial lifter.
pub fn initial_val_mpjpe(model: &RefineModel, val: &[Sample]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let p = prepare(val, &model.norm);
    let preds = model.norm.unpose_3d(&initial_outputs(model, &p.x)?)?;
    let gts: Vec<Pose3D> = val.iter().map(|s| s.gt.clone()).collect();
    mean_mpjpe(&preds, &gts)
}

/// Validation MPJPE of a single refinement pass from `DEFAULT_START_TIMESTEP`.
pub fn refine_val_mpjpe(model: &RefineModel, val: &[Sample], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let plan = make_timestep_plan(DEFAULT_START_TIMESTEP.min(sched.timesteps()), 1, sched.timesteps())?;
    let xs: Vec<&Pose2D> = val.iter().map(|s| &s.noisy).collect();
    let ybar = model.initial_predict(&xs)?;
    let mut preds = Vec::with_capacity(val.len());
    for start in (0..val.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(val.len());
        let yb: Vec<&Pose3D> = ybar[start..end].iter().collect();
        let mut streams: Vec<RngStream> = (start..end).map(|i| RngStream::new(seed, mix(&[0x7a1, i as u64]))).collect();
        let trace = reverse_refine_batch(&yb, &xs[start..end], model, &plan, sched, &mut streams, Renoise::Marginal)?;
        preds.extend(trace.outputs);
    }
    let gts: Vec<Pose3D> = val.iter().map(|s| s.gt.clone()).collect();
    mean_mpjpe(&preds, &gts)
}

/// Runs the remaining epochs of `stage`, starting at `opt.epochs_done`.
/// Shuffling and noise are keyed by `(seed, stage, epoch, batch)`, so a
/// resumed run follows the same trajectory as an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    stage: Stage,
    model: &mut RefineModel,
    opt: &mut OptimizerState,
    train: &[Sample],
    val: &[Sample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochLog>> {
    cfg.validate(model.config.num_joints)?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    opt.check_matches(&model.params)?;
    let mut data = prepare(train, &model.norm);
    if stage == Stage::Refine {
        data.y_bar = Some(initial_outputs(model, &data.x)?);
    }
    let val = val_subset(val, cfg);
    let mut logs = Vec::new();
    for epoch in opt.epochs_done as usize..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = RngStream::new(cfg.seed, mix(&[stage.tag(), epoch as u64])).permutation(train.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = TrainBatch {
                y0: gather_rows(&data.y0, idx),
                x: gather_rows(&data.x, idx),
                y_bar: data.y_bar.as_ref().map_or_else(|| Tensor::zeros(&[0]), |t| gather_rows(t, idx)),
            };
            let global = epoch * order.len().div_ceil(cfg.batch_size) + bi;
            let loss = match stage {
                Stage::Initial => initial_step(model, opt, &batch, lr, global)?,
                Stage::Refine => {
                    let mut stream = RngStream::new(cfg.seed, mix(&[stage.tag(), epoch as u64, bi as u64 + 1]));
                    train_step(model, opt, &batch, sched, &mut stream, cfg, lr, global)?
                }
            };
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let val_mpjpe = match stage {
            Stage::Initial => initial_val_mpjpe(model, val)?,
            Stage::Refine => refine_val_mpjpe(model, val, sched, cfg.seed)?,
        };
        opt.epochs_done = epoch as u32 + 1;
        let log = EpochLog { epoch, lr, mean_loss: total / count as f64, val_mpjpe };
        log::info!("{log}");
        hook(&log, model, opt)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Trains the initial lifter alone; the rest of the parameters are untouched.
pub fn pretrain_initial(
    model: &mut RefineModel,
    opt: &mut OptimizerState,
    train: &[Sample],
    val: &[Sample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochLog>> {
    train_stage(Stage::Initial, model, opt, train, val, sched, cfg, hook)
}

/// Trains the refinement network with the initial lifter frozen.
pub fn train_refine(
    model: &mut RefineModel,
    opt: &mut OptimizerState,
    train: &[Sample],
    val: &[Sample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochLog>> {
    train_stage(Stage::Refine, model, opt, train, val, sched, cfg, hook)
}
