//! End-to-end acceptance checks. Each check prints one PASS or FAIL line; the
//! test fails if any check does.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffrefine::diffusion::{
    build_cosine_schedule, forward_diffuse, posterior_step_with, NoiseSchedule, PosteriorMean, DEFAULT_COSINE_OFFSET,
    DEFAULT_TIMESTEPS,
};
use diffrefine::graph::{evaluate, value_and_grad, Gradients};
use diffrefine::hypotheses::{aggregate, AggregateMode, HypothesisSet};
use diffrefine::metrics::{mpjpe_points, p_mpjpe_points};
use diffrefine::model::{build_refine, sinusoidal_features, ModelConfig, ModelParams, RefineInputs, RefineModel};
use diffrefine::skeleton::{generate_pose, make_skeleton, Camera, Pose3D, PoseGenConfig};
use diffrefine::train::{lr_at, TrainConfig};
use diffrefine::{Bindings, Graph, NodeId, RngStream, Tensor};
use diffrefine_cli::commands::eval::EvalReport;
use diffrefine_cli::commands::infer::PredictionRecord;
use diffrefine_cli::config::RunConfig;
use tempfile::tempdir;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Runs one command in-process against `run_dir`; panics on a non-zero exit.
fn in_run(config: &Path, run_dir: &Path, args: &[&str]) {
    let mut all = vec!["diffrefine", "-c", config.to_str().unwrap(), "--run-dir", run_dir.to_str().unwrap()];
    all.extend_from_slice(args);
    assert_eq!(diffrefine_cli::main_with_args(&all), 0, "{all:?}");
}

/// gen-data, pretrain and refine into `run_dir`.
fn train_pipeline(config: &Path, run_dir: &Path) {
    in_run(config, run_dir, &["gen-data"]);
    in_run(config, run_dir, &["train", "--stage", "pretrain"]);
    in_run(config, run_dir, &["train", "--stage", "refine"]);
}

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn sched() -> NoiseSchedule {
    build_cosine_schedule(DEFAULT_TIMESTEPS, DEFAULT_COSINE_OFFSET).unwrap()
}

fn pose(seed: u64, stream: u64) -> Pose3D {
    generate_pose(&mut RngStream::new(seed, stream), &make_skeleton(), &PoseGenConfig::default()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Forward-diffusion sample moments against `√ᾱ_t·y₀` and `1−ᾱ_t`. The mean
/// is compared as a vector, since the root coordinates and every coordinate
/// at t=999 have targets at or near zero; the variance per coordinate.
fn diffusion_moments() -> (bool, String) {
    let start = Instant::now();
    let s = sched();
    let y0 = pose(1, 1).to_tensor();
    let n = y0.numel();
    let draws = 100_000;
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for t in [10, 200, 500, 999] {
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut stream = RngStream::new(42, t as u64);
        for _ in 0..draws {
            let eps = stream.gaussian(y0.shape());
            let y = forward_diffuse(&y0, t, &eps, &s).unwrap();
            for (i, v) in y.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let c = s.alpha_bar(t).sqrt();
        let target: Vec<f64> = y0.data().iter().map(|v| c * v).collect();
        let mean: Vec<f64> = sum.iter().map(|v| v / draws as f64).collect();
        let diff: Vec<f64> = mean.iter().zip(&target).map(|(a, b)| a - b).collect();
        worst_mean = worst_mean.max(norm(&diff) / norm(&target));
        let tv = 1.0 - s.alpha_bar(t);
        for i in 0..n {
            let var = sq[i] / draws as f64 - mean[i] * mean[i];
            worst_var = worst_var.max((var - tv).abs() / tv);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_mean <= 0.02 && worst_var <= 0.02 && secs < 10.0;
    (pass, format!("worst mean error {:.3}%, worst variance error {:.3}%, {secs:.1} s", 100.0 * worst_mean, 100.0 * worst_var))
}

/// Noiseless posterior chain from t=999 to 0 with ŷ₀ = y₀.
fn chain(variant: PosteriorMean) -> (f64, f64) {
    let s = sched();
    let y0 = pose(2, 1).to_tensor().map(|v| v / 1000.0);
    let mut y = y0.map(|v| s.alpha_bar(999).sqrt() * v);
    let mut drift = 0.0f64;
    for t in (1..=999).rev() {
        y = posterior_step_with(&y, &y0, t, t - 1, &s, None, variant).unwrap();
        let expect = y0.map(|v| s.alpha_bar(t - 1).sqrt() * v);
        drift = drift.max(y.max_abs_diff(&expect));
    }
    (y.max_abs_diff(&y0), drift)
}

fn posterior_identity() -> (bool, String) {
    let start = Instant::now();
    let (last, drift) = chain(PosteriorMean::StepAlpha);
    let (_, bad_drift) = chain(PosteriorMean::CumulativeAlpha);
    let secs = start.elapsed().as_secs_f64();
    let pass = last < 1e-9 && drift < 1e-9 && bad_drift > 1e-3 && secs < 1.0;
    (
        pass,
        format!(
            "final error {last:.1e}, largest intermediate error {drift:.1e}; cumulative-alpha coefficient drifts {bad_drift:.2e}; {secs:.2} s"
        ),
    )
}

const FD_STEP: f64 = 1e-5;
const FD_POINTS: u64 = 10;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

type Build = fn(&mut Graph, &[NodeId]) -> NodeId;

struct OpCase {
    name: &'static str,
    params: Vec<(&'static str, Vec<usize>)>,
    domain: fn(f64) -> f64,
    build: Build,
}

fn op_cases() -> Vec<OpCase> {
    fn any(v: f64) -> f64 {
        v
    }
    fn off_zero(v: f64) -> f64 {
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    }
    fn positive(v: f64) -> f64 {
        0.2 + v.abs()
    }
    let c = |name, params: &[(&'static str, &[usize])], domain, build| OpCase {
        name,
        params: params.iter().map(|(n, s)| (*n, s.to_vec())).collect(),
        domain,
        build,
    };
    vec![
        c("add", &[("a", &[3, 4]), ("b", &[3, 4])], any, |g, p| g.add(p[0], p[1])),
        c("sub", &[("a", &[3, 4]), ("b", &[3, 4])], any, |g, p| g.sub(p[0], p[1])),
        c("mul", &[("a", &[2, 3, 2]), ("b", &[2, 3, 2])], any, |g, p| g.mul(p[0], p[1])),
        c("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], any, |g, p| g.matmul(p[0], p[1])),
        c("matmul batched", &[("a", &[2, 3, 4]), ("b", &[4, 5])], any, |g, p| g.matmul(p[0], p[1])),
        c("matmul matrix-batched", &[("a", &[3, 3]), ("b", &[2, 3, 4])], any, |g, p| g.matmul(p[0], p[1])),
        c("matmul equal batch", &[("a", &[2, 2, 3, 4]), ("b", &[2, 2, 4, 3])], any, |g, p| g.matmul(p[0], p[1])),
        c("transpose", &[("a", &[2, 3, 4])], any, |g, p| g.transpose(p[0], 0, 2)),
        c("reshape", &[("a", &[2, 3, 4])], any, |g, p| g.reshape(p[0], &[6, 4])),
        c("concat", &[("a", &[2, 3, 2]), ("b", &[2, 3, 1])], any, |g, p| g.concat(&[p[0], p[1]], 2)),
        c("slice", &[("a", &[3, 5])], any, |g, p| g.slice(p[0], 1, 1, 4)),
        c("sum axis", &[("a", &[2, 3, 4])], any, |g, p| g.sum(p[0], Some(1))),
        c("sum all", &[("a", &[2, 3])], any, |g, p| g.sum(p[0], None)),
        c("mean axis", &[("a", &[2, 3, 4])], any, |g, p| g.mean(p[0], Some(2))),
        c("mean all", &[("a", &[4, 3])], any, |g, p| g.mean(p[0], None)),
        c("relu", &[("a", &[3, 4])], off_zero, |g, p| g.relu(p[0])),
        c("gelu", &[("a", &[3, 4])], any, |g, p| g.gelu(p[0])),
        c("sigmoid", &[("a", &[3, 4])], any, |g, p| g.sigmoid(p[0])),
        c("tanh", &[("a", &[3, 4])], any, |g, p| g.tanh(p[0])),
        c("softmax", &[("a", &[2, 3, 5])], any, |g, p| g.softmax(p[0])),
        c("layer_norm", &[("a", &[2, 3, 6])], any, |g, p| g.layer_norm(p[0], 1e-5)),
        c("broadcast", &[("a", &[3, 1])], any, |g, p| g.broadcast(p[0], &[2, 3, 4])),
        c("sqrt", &[("a", &[3, 4])], positive, |g, p| g.sqrt(p[0])),
        c("scale", &[("a", &[3, 4])], any, |g, p| g.scale(p[0], -2.5)),
    ]
}

/// Worst relative error of one op over the random points.
fn op_worst(case: &OpCase) -> f64 {
    let mut worst = 0.0f64;
    for point in 0..FD_POINTS {
        let mut stream = RngStream::new(point, 31);
        let params: Vec<Tensor> = case.params.iter().map(|(_, s)| stream.gaussian(s).map(case.domain)).collect();
        let bind = |ps: &[Tensor], g: &Graph, out: NodeId| {
            let mut b = Bindings::new();
            for ((n, _), t) in case.params.iter().zip(ps) {
                b.bind(*n, t);
            }
            evaluate(g, &b).unwrap().value(out).clone()
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = case.params.iter().map(|(n, _)| g.param(n)).collect();
        let y = (case.build)(&mut g, &ids);
        let shape = bind(&params, &g, y).shape().to_vec();
        let w = g.constant(RngStream::new(point, 777).gaussian(&shape));
        let prod = g.mul(y, w);
        let loss = g.sum(prod, None);
        let mut b = Bindings::new();
        for ((n, _), t) in case.params.iter().zip(&params) {
            b.bind(*n, t);
        }
        let (_, grads) = value_and_grad(&g, loss, &b).unwrap();
        for (pi, (name, _)) in case.params.iter().enumerate() {
            for idx in 0..params[pi].numel() {
                let at = |delta: f64| {
                    let mut ps = params.clone();
                    ps[pi].data_mut()[idx] += delta;
                    bind(&ps, &g, loss).data()[0]
                };
                let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(grads[*name].data()[idx], numeric));
            }
        }
    }
    worst
}

fn fd_model_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        blocks: 1,
        heads: 2,
        time_dim: 8,
        initial_layers: 1,
        initial_channels: 8,
        prm_hidden: 4,
        ..ModelConfig::default()
    }
}

fn fd_model(cfg: &ModelConfig, params: ModelParams) -> RefineModel {
    let norm = diffrefine::diffusion::InputNormalization::for_camera(&Camera::default());
    RefineModel::new(cfg.clone(), params, norm, &make_skeleton()).unwrap()
}

/// `Σ w ⊙ refine(...)` and its gradient with respect to every parameter.
fn refine_objective(m: &RefineModel, inputs: &[Tensor; 4], w: &Tensor, grad: bool) -> (f64, Option<Gradients>) {
    let mut g = Graph::new();
    let loss = {
        let mut c = m.ctx(&mut g, inputs[0].shape()[0]);
        let inp = RefineInputs::declare(c.g);
        let out = build_refine(&mut c, &inp);
        let wn = c.g.constant(w.clone());
        let prod = c.g.mul(out, wn);
        c.g.sum(prod, None)
    };
    let mut b = Bindings::new();
    m.params.bind(&mut b);
    b.bind("y_bar", &inputs[0]).bind("y_t", &inputs[1]).bind("x2d", &inputs[2]).bind("tsin", &inputs[3]);
    if grad {
        let (e, grads) = value_and_grad(&g, loss, &b).unwrap();
        (e.value(loss).data()[0], Some(grads))
    } else {
        (evaluate(&g, &b).unwrap().value(loss).data()[0], None)
    }
}

/// Worst relative error of the refinement network's parameter gradients
/// over the random points; every trainable entry is checked at each point.
fn refine_worst() -> (f64, usize) {
    let cfg = fd_model_config();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for point in 0..FD_POINTS {
        let mut s = RngStream::new(point, 4242);
        let params = ModelParams::from_map(
            cfg.parameter_shapes().into_iter().map(|(k, sh)| (k, s.gaussian(&sh).map(|v| v / (sh[0] as f64).sqrt()))).collect(),
        );
        let ts = [s.int_inclusive(1, 1000), s.int_inclusive(1, 1000)];
        let inputs = [
            s.gaussian(&[2, 17, 3]).map(|v| 0.3 * v),
            s.gaussian(&[2, 17, 3]),
            s.gaussian(&[2, 17, 2]).map(|v| 0.4 * v),
            sinusoidal_features(&ts, cfg.time_dim),
        ];
        let w = s.gaussian(&[2, 17, 3]);
        let (_, grads) = refine_objective(&fd_model(&cfg, params.clone()), &inputs, &w, true);
        let grads = grads.unwrap();
        for (name, t) in params.iter().filter(|(k, _)| k.starts_with("sgct.") || k.starts_with("prm.")) {
            for idx in 0..t.numel() {
                let at = |delta: f64| {
                    let mut p = params.clone();
                    p.get_mut(name).unwrap().data_mut()[idx] += delta;
                    refine_objective(&fd_model(&cfg, p), &inputs, &w, false).0
                };
                let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(grads[name.as_str()].data()[idx], numeric));
                checked += 1;
            }
        }
    }
    (worst, checked)
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let cases = op_cases();
    let mut worst_op = ("", 0.0f64);
    for c in &cases {
        let w = op_worst(c);
        if w >= worst_op.1 {
            worst_op = (c.name, w);
        }
    }
    let (refine, checked) = refine_worst();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_op.1 < 1e-4 && refine < 1e-4 && secs < 60.0;
    (
        pass,
        format!(
            "{} ops, worst {:.1e} ({}); refine network worst {refine:.1e} over {checked} entries; {secs:.1} s",
            cases.len(),
            worst_op.1,
            worst_op.0
        ),
    )
}

fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    [
        [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
        [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
        [-sb, cb * sc, cb * cc],
    ]
}

fn procrustes() -> (bool, String) {
    use std::f64::consts::PI;
    let start = Instant::now();
    let mut s = RngStream::new(5, 5);
    let mut worst_sim = 0.0f64;
    for i in 0..100 {
        let gt = pose(1000 + i, 7);
        let r = rotation(s.uniform_range(-PI, PI), s.uniform_range(-PI, PI), s.uniform_range(-PI, PI));
        let scale = s.uniform_range(-1.0, 1.0).exp();
        let shift = [s.uniform_range(-1e3, 1e3), s.uniform_range(-1e3, 1e3), s.uniform_range(-1e3, 1e3)];
        let moved: Vec<[f64; 3]> = gt
            .joints()
            .iter()
            .map(|v| std::array::from_fn(|k| scale * (r[k][0] * v[0] + r[k][1] * v[1] + r[k][2] * v[2]) + shift[k]))
            .collect();
        worst_sim = worst_sim.max(p_mpjpe_points(&moved, gt.joints()).unwrap());
    }
    let mut violations = Vec::new();
    let mut worst_excess = 0.0f64;
    for i in 0..1000u64 {
        let (a, b) = (pose(2 * i, 9), pose(2 * i + 1, 9));
        let p = p_mpjpe_points(a.joints(), b.joints()).unwrap();
        let m = mpjpe_points(a.joints(), b.joints());
        if p > m {
            violations.push(i);
            worst_excess = worst_excess.max(p - m);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_sim < 1e-6 && violations.is_empty() && secs < 5.0;
    (
        pass,
        format!(
            "similarity residual {worst_sim:.1e} mm; p_mpjpe > mpjpe on {} of 1000 pairs (largest excess {worst_excess:.3} mm, pairs {:?}); {secs:.2} s",
            violations.len(),
            &violations[..violations.len().min(8)]
        ),
    )
}

fn reproj(p: [f64; 3], x: [f64; 2], cam: &Camera) -> f64 {
    let q = cam.project_point(p).unwrap();
    ((q[0] - x[0]).powi(2) + (q[1] - x[1]).powi(2)).sqrt()
}

/// Aggregation on hypotheses produced by the trained model: recomputed per
/// sample, compared with the CLI output and with an exhaustive scan.
fn aggregation(run: &Path) -> (bool, String) {
    let records: Vec<PredictionRecord> =
        serde_json::from_str(&fs::read_to_string(run.join("infer/val-aggregate-h10-k1/predictions.json")).unwrap()).unwrap();
    let data = diffrefine::dataset::dataset_read(run.join("data/val.drpz")).unwrap();
    let cam = data.camera;
    let plan = diffrefine::diffusion::make_timestep_plan(200, 1, 1000).unwrap();
    let sets: Vec<HypothesisSet> = records
        .iter()
        .map(|r| HypothesisSet {
            hypotheses: r.hypotheses.iter().map(|h| Pose3D::new(h.clone()).unwrap()).collect(),
            iterations: 1,
            base_seed: 0,
            plan: plan.clone(),
        })
        .collect();
    let start = Instant::now();
    let agg: Vec<Pose3D> = sets
        .iter()
        .zip(&data.samples)
        .map(|(h, s)| aggregate(h, &s.noisy, &cam, AggregateMode::JointWise).unwrap())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let mut mismatched = 0;
    let mut same_as_cli = true;
    for ((a, set), (rec, s)) in agg.iter().zip(&sets).zip(records.iter().zip(&data.samples)) {
        same_as_cli &= a.joints() == rec.final_pose.as_slice();
        let x = s.noisy.joints();
        for j in 0..x.len() {
            let best = set.hypotheses.iter().map(|h| reproj(h.joints()[j], x[j], &cam)).fold(f64::INFINITY, f64::min);
            if reproj(a.joints()[j], x[j], &cam) != best {
                mismatched += 1;
            }
        }
    }
    let hyps = sets.first().map_or(0, |s| s.len());
    let pass = records.len() == 500 && hyps == 10 && mismatched == 0 && same_as_cli && secs < 5.0;
    (
        pass,
        format!(
            "{} samples x {hyps} hypotheses, {mismatched} joints off the exhaustive minimum, matches CLI output: {same_as_cli}; {secs:.3} s",
            records.len()
        ),
    )
}

fn mpjpe_of(report: &EvalReport, method: &str) -> f64 {
    report.row(method).unwrap_or_else(|| panic!("no row {method}")).metrics.mpjpe
}

/// Trains with the acceptance configuration and scores the strategy grid on
/// the validation split. Returns the run directory, the report and seconds.
fn train_and_evaluate(cwd: &Path) -> (PathBuf, EvalReport, String, f64) {
    let cfg = config("acceptance.toml");
    let run = cwd.join("acceptance-run");
    let start = Instant::now();
    train_pipeline(&cfg, &run);
    in_run(&cfg, &run, &["eval"]);
    let table = fs::read_to_string(run.join("eval/table.txt")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(run.join("eval/report.json")).unwrap()).unwrap();
    (run, report, table, secs)
}

fn refinement_improves(report: &EvalReport, secs: f64) -> (bool, String) {
    let initial = mpjpe_of(report, "initial");
    let single = mpjpe_of(report, "single-h1-k1");
    let pass = report.samples >= 5000 && single < initial && secs < 1800.0;
    (
        pass,
        format!(
            "{} val samples: initial {initial:.2} mm, refined {single:.2} mm ({:+.2}); train+eval {:.1} min",
            report.samples,
            single - initial,
            secs / 60.0
        ),
    )
}

fn strategy_ordering(report: &EvalReport) -> (bool, String) {
    let avg = mpjpe_of(report, "average-h10-k5");
    let agg = mpjpe_of(report, "aggregate-h10-k5");
    let best = mpjpe_of(report, "best-of-h10-k5");
    let single = mpjpe_of(report, "single-h10-k5");
    let pass = agg <= avg + 0.05 && best <= single;
    (pass, format!("H=10 K=5: aggregate {agg:.2} vs average {avg:.2} mm; best-of {best:.2} vs single {single:.2} mm"))
}

fn determinism(cwd: &Path) -> (bool, String) {
    let cfg = config("tiny.toml");
    let mut reports = Vec::new();
    for name in ["det-a", "det-b"] {
        let run = cwd.join(name);
        train_pipeline(&cfg, &run);
        in_run(&cfg, &run, &["infer"]);
        in_run(&cfg, &run, &["eval"]);
        let infer = fs::read(run.join("infer/test-aggregate-h4-k2/report.json")).unwrap();
        let eval = fs::read(run.join("eval/report.json")).unwrap();
        let preds = fs::read(run.join("infer/test-aggregate-h4-k2/predictions.json")).unwrap();
        reports.push((infer, eval, preds));
    }
    let (a, b) = (&reports[0], &reports[1]);
    let pass = a == b;
    (
        pass,
        format!(
            "infer report identical: {}, eval report identical: {}, predictions identical: {} ({} + {} bytes)",
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2,
            a.0.len(),
            a.1.len()
        ),
    )
}

fn hyperparameters() -> (bool, String) {
    let d = RunConfig::default();
    let t = &d.train;
    let mut ok = d.diffusion.timesteps == 1000
        && d.diffusion.start_timestep == 200
        && d.diffusion.cosine_offset == 0.008
        && t.epochs == 30
        && t.batch_size == 512
        && t.base_lr == 5e-4
        && t.epoch_decay == 0.95
        && t.period_decay == 0.5
        && t.decay_period == 5;
    let closed = |e: i32| 5e-4 * 0.95f64.powi(e) * 0.5f64.powi(e / 5);
    let mut worst = 0.0f64;
    for e in [0, 1, 5, 29] {
        let rel = (lr_at(e as usize, &d.train_config()) - closed(e)).abs() / closed(e);
        worst = worst.max(rel);
    }
    ok &= worst < 1e-12 && d.train_config() == TrainConfig { seed: 0, timesteps: 1000, ..TrainConfig::default() };
    (
        ok,
        format!(
            "T={} t_start={} s={} epochs={} batch={} lr={}; lr_at worst relative error {worst:.1e}",
            d.diffusion.timesteps, d.diffusion.start_timestep, d.diffusion.cosine_offset, t.epochs, t.batch_size, t.base_lr
        ),
    )
}

#[test]
fn acceptance() {
    let dir = tempdir().unwrap();
    let cwd = dir.path();
    let mut out = Vec::new();
    let mut record = |id, name, (pass, detail): (bool, String)| {
        println!("[{id}/9] {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        out.push(Outcome { id, name, pass, detail });
    };
    record(1, "diffusion moments", diffusion_moments());
    record(2, "posterior identity", posterior_identity());
    record(3, "gradient correctness", gradients());
    record(4, "procrustes alignment", procrustes());

    let (run, report, table, secs) = train_and_evaluate(cwd);
    in_run(&config("acceptance.toml"), &run, &["infer", "--strategy", "aggregate", "--H", "10", "--K", "1", "--limit", "500"]);
    record(5, "aggregation optimality", aggregation(&run));
    record(6, "refinement improves the initial pose", refinement_improves(&report, secs));
    record(7, "strategy ordering", strategy_ordering(&report));
    println!("{table}");
    record(8, "pipeline determinism", determinism(cwd));
    record(9, "hyperparameter defaults", hyperparameters());

    println!("\nsummary:");
    for o in &out {
        println!("  [{}/9] {} {}: {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<usize> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
}
