use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffrefine::hypotheses::HypothesisSet;
use diffrefine::metrics::{evaluate, MetricReport};
use diffrefine::skeleton::{Pose2D, Pose3D, JOINT_NAMES};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Strategy};
use crate::error::{CliError, CliResult};
use crate::run_dir::{write_file, RunDir, StageName};

use super::infer::{combine, read_predictions};
use super::{hypotheses_for, load_model, load_split};

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub strategy: Option<Strategy>,
    pub hypotheses: Option<usize>,
    pub iterations: Option<usize>,
    pub metrics: MetricReport,
    /// MPJPE of this row minus MPJPE of the baseline row, in millimeters.
    pub delta_mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub baseline: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub struct EvalOutput {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub table: String,
}

/// Row label for a strategy at `h` hypotheses and `k` iterations.
pub fn method_label(strategy: Strategy, h: usize, k: usize) -> String {
    format!("{}-h{h}-k{k}", strategy.name())
}

/// Scores prediction files against the split's ground truth, with the first
/// file as baseline, or, without files, runs the strategy grid over the
/// configured `(H, K)` pairs with `single` at the smallest pair as baseline.
pub fn run(cfg: &RunConfig, run: &RunDir, predictions: &[PathBuf]) -> CliResult<EvalOutput> {
    let data = load_split(run, cfg.eval.split, cfg.eval.limit)?;
    let gts: Vec<Pose3D> = data.samples.iter().map(|s| s.gt.clone()).collect();
    let thr = cfg.eval.pck_threshold;
    let (mut rows, baseline_idx) = if predictions.is_empty() {
        grid_rows(cfg, run, &data.samples, &data.camera, &gts)?
    } else {
        file_rows(predictions, &gts, thr)?
    };
    let base = rows[baseline_idx].metrics.mpjpe;
    for r in rows.iter_mut() {
        r.delta_mpjpe = r.metrics.mpjpe - base;
    }
    let report = EvalReport {
        split: cfg.eval.split.name().to_string(),
        samples: gts.len(),
        baseline: rows[baseline_idx].method.clone(),
        rows,
    };
    let dir = run.eval_dir();
    let table = format_table(&report);
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_file(&dir.join("table.txt"), table.as_bytes())?;
    write_file(&dir.join("per_joint.csv"), per_joint_csv(&report).as_bytes())?;
    run.dump_config(&dir, "eval", cfg)?;
    Ok(EvalOutput { dir, report, table })
}

fn row(method: String, strategy: Option<Strategy>, h: Option<usize>, k: Option<usize>, metrics: MetricReport) -> EvalRow {
    EvalRow { method, strategy, hypotheses: h, iterations: k, metrics, delta_mpjpe: 0.0 }
}

fn file_rows(paths: &[PathBuf], gts: &[Pose3D], thr: f64) -> CliResult<(Vec<EvalRow>, usize)> {
    let n = gts[0].num_joints();
    let mut rows = Vec::new();
    for p in paths {
        let records = read_predictions(p, n)?;
        if records.len() != gts.len() {
            return Err(CliError::data(format!("{}: {} predictions for {} samples", p.display(), records.len(), gts.len())));
        }
        let preds = records
            .into_iter()
            .map(|r| Pose3D::new(r.final_pose).map_err(|e| CliError::data(format!("{}: record {}: {e}", p.display(), r.id))))
            .collect::<CliResult<Vec<_>>>()?;
        rows.push(row(file_label(p), None, None, None, evaluate(&preds, gts, thr)?));
    }
    Ok((rows, 0))
}

fn file_label(p: &Path) -> String {
    let parent = p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned());
    match parent {
        Some(d) if p.file_name().is_some_and(|f| f == "predictions.json") => d,
        _ => p.display().to_string(),
    }
}

fn grid_rows(
    cfg: &RunConfig,
    run: &RunDir,
    samples: &[diffrefine::dataset::Sample],
    camera: &diffrefine::skeleton::Camera,
    gts: &[Pose3D],
) -> CliResult<(Vec<EvalRow>, usize)> {
    let model = load_model(cfg, run, StageName::Refine)?;
    let sched = cfg.schedule()?;
    let thr = cfg.eval.pck_threshold;
    let xs: Vec<&Pose2D> = samples.iter().map(|s| &s.noisy).collect();
    let y_bar = model.initial_predict(&xs)?;
    let mut hs = cfg.eval.hypotheses.clone();
    let mut ks = cfg.eval.iterations.clone();
    hs.sort_unstable();
    hs.dedup();
    ks.sort_unstable();
    ks.dedup();
    let h_max = *hs.last().expect("validated non-empty");
    let mut rows = vec![row("initial".into(), None, None, None, evaluate(&y_bar, gts, thr)?)];
    for &k in &ks {
        let full = hypotheses_for(cfg, &model, &sched, &y_bar, &xs, h_max, k)?;
        for &h in &hs {
            let sets: Vec<HypothesisSet> = full
                .iter()
                .map(|s| HypothesisSet { hypotheses: s.hypotheses[..h].to_vec(), ..s.clone() })
                .collect();
            for strategy in Strategy::ALL {
                let preds = sets
                    .iter()
                    .zip(samples)
                    .map(|(set, s)| combine(strategy, set, &s.noisy, &s.gt, camera, cfg.infer.aggregate_mode))
                    .collect::<CliResult<Vec<_>>>()?;
                rows.push(row(method_label(strategy, h, k), Some(strategy), Some(h), Some(k), evaluate(&preds, gts, thr)?));
            }
        }
    }
    // The first grid row is `single` at the smallest (H, K).
    Ok((rows, 1))
}

fn format_table(report: &EvalReport) -> String {
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut out = String::new();
    let _ = writeln!(out, "split {}, {} samples, baseline {}", report.split, report.samples, report.baseline);
    let _ = writeln!(
        out,
        "{:<24} {:>4} {:>4} {:>10} {:>9} {:>10} {:>8}",
        "method", "H", "K", "MPJPE", "delta", "P-MPJPE", "PCK"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:<24} {:>4} {:>4} {:>10.3} {:>+9.3} {:>10.3} {:>8.2}",
            r.method,
            opt(r.hypotheses),
            opt(r.iterations),
            r.metrics.mpjpe,
            r.delta_mpjpe,
            r.metrics.p_mpjpe,
            r.metrics.pck
        );
    }
    out
}

fn per_joint_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,joint,mpjpe,p_mpjpe,pck\n");
    for r in &report.rows {
        let m = &r.metrics;
        for (j, name) in JOINT_NAMES.iter().enumerate().take(m.per_joint_mpjpe.len()) {
            let _ = writeln!(
                out,
                "{},{name},{:.6},{:.6},{:.4}",
                r.method, m.per_joint_mpjpe[j], m.per_joint_p_mpjpe[j], m.per_joint_pck[j]
            );
        }
    }
    out
}
