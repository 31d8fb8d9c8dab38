mod common;

use std::fs;
use std::path::Path;

use common::{cli, in_run, ok, tiny_config, train_pipeline};
use diffrefine::dataset::{dataset_read, dataset_write, generate_samples, Split};
use diffrefine::skeleton::{make_skeleton, Camera, PoseGenConfig};
use diffrefine_cli::commands::eval::EvalReport;
use diffrefine_cli::commands::infer::{InferReport, PredictionRecord};
use diffrefine_cli::config::{describe_keys, RunConfig, Strategy};
use tempfile::tempdir;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    let keys = describe_keys();
    assert!(keys.lines().count() > 40);
    for line in keys.lines() {
        assert!(help.contains(line), "--help lacks `{line}`");
    }
    for key in ["diffusion.timesteps = 1000", "diffusion.start_timestep = 200", "diffusion.cosine_offset = 0.008"] {
        assert!(keys.lines().any(|l| l.trim() == key), "missing {key}");
    }
}

#[test]
fn dumped_config_loads_back_equal() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config();
    let dumped = ok(dir.path(), &["-c", cfg.to_str().unwrap(), "--set", "train.epochs=9", "--seed", "5", "config"]);
    let parsed = RunConfig::from_toml(&dumped).unwrap();
    assert_eq!(parsed.train.epochs, 9);
    assert_eq!(parsed.seed, 5);
    assert_eq!(parsed.to_toml(), dumped);
    let path = dir.path().join("dump.toml");
    fs::write(&path, &dumped).unwrap();
    assert_eq!(ok(dir.path(), &["-c", path.to_str().unwrap(), "config"]), dumped);
    assert_eq!(ok(dir.path(), &["config"]), RunConfig::default().to_toml());
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let dir = tempdir().unwrap();
    for args in [
        &["--set", "train.bogus=1", "config"][..],
        &["--set", "diffusion.start_timestep=0", "config"],
        &["--set", "model.num_joints=16", "config"],
        &["infer", "--H", "0"],
        &["train"],
        &["no-such-command"],
    ] {
        assert_eq!(cli(dir.path(), args).status.code(), Some(1), "{args:?}");
    }
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[data]\ntrain_sample = 10\n").unwrap();
    assert_eq!(cli(dir.path(), &["-c", path.to_str().unwrap(), "config"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["-c", "missing.toml", "config"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_fail_before_training() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config();
    let run = dir.path().join("run");
    let c = cfg.to_str().unwrap();
    let r = run.to_str().unwrap();
    for stage in ["pretrain", "refine"] {
        let out = cli(dir.path(), &["-c", c, "--run-dir", r, "train", "--stage", stage]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    }
    ok(dir.path(), &["-c", c, "--run-dir", r, "gen-data"]);
    let out = cli(dir.path(), &["-c", c, "--run-dir", r, "train", "--stage", "refine"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("initial predictor checkpoint"));
    assert!(!run.join("checkpoints").exists());
    assert_eq!(cli(dir.path(), &["-c", c, "--run-dir", r, "infer"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["-c", c, "eval"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_and_writes_requested_counts() {
    let dir = tempdir().unwrap();
    let c = tiny_config();
    let c = c.to_str().unwrap();
    let out = ok(dir.path(), &["-c", c, "--set", "data.train_samples=300", "gen-data"]);
    assert!(out.contains("train: 300 samples") && out.contains("val: 200 samples"));
    ok(dir.path(), &["-c", c, "--set", "data.train_samples=300", "--run-dir", "again", "gen-data"]);
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].file_name().unwrap().to_str().unwrap().ends_with("-seed7"));
    for split in ["train", "val", "test"] {
        let a = fs::read(runs[0].join(format!("data/{split}.drpz"))).unwrap();
        let b = fs::read(dir.path().join(format!("again/data/{split}.drpz"))).unwrap();
        assert_eq!(a, b, "{split}");
    }
    assert_eq!(dataset_read(runs[0].join("data/train.drpz")).unwrap().samples.len(), 300);
    let other = ok(dir.path(), &["-c", c, "--seed", "8", "--run-dir", "other", "gen-data"]);
    assert!(other.contains("train: 1024 samples"));
    assert_ne!(fs::read(dir.path().join("other/data/test.drpz")).unwrap(), fs::read(runs[0].join("data/test.drpz")).unwrap());
}

#[test]
fn pipeline_outputs_follow_their_contracts() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config();
    let run = dir.path().join("run");
    train_pipeline(dir.path(), &cfg, &run, &[]);
    for f in ["checkpoints/initial.ckpt", "checkpoints/refine.ckpt", "logs/pretrain.log", "logs/refine.log"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("logs/refine.log")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let infer = |args: &[&str]| {
        let all: Vec<&str> = ["infer"].iter().chain(args).copied().collect();
        in_run(dir.path(), &cfg, &run, &all)
    };
    let out = infer(&["--strategy", "single", "--H", "1", "--K", "2"]);
    assert!(out.contains("strategy single H 1 K 2"));
    infer(&["--strategy", "aggregate", "--H", "1", "--K", "2"]);
    let single: Vec<PredictionRecord> = read_json(&run.join("infer/test-single-h1-k2/predictions.json"));
    let agg: Vec<PredictionRecord> = read_json(&run.join("infer/test-aggregate-h1-k2/predictions.json"));
    assert_eq!(single.len(), 200);
    assert_eq!(single, agg);

    infer(&["--strategy", "aggregate", "--H", "10", "--K", "5", "--limit", "20"]);
    let dir10 = run.join("infer/test-aggregate-h10-k5");
    let recs: Vec<PredictionRecord> = read_json(&dir10.join("predictions.json"));
    assert_eq!(recs.len(), 20);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.id, i);
        assert_eq!(r.hypotheses.len(), 10);
        assert!(r.hypotheses.iter().all(|h| h.len() == 17));
        assert_eq!(r.final_pose.len(), 17);
    }
    let report: InferReport = read_json(&dir10.join("report.json"));
    assert_eq!((report.strategy, report.hypotheses, report.iterations), (Strategy::Aggregate, 10, 5));
    assert_eq!(report.metrics.samples, 20);
    let text = fs::read_to_string(dir10.join("report.json")).unwrap();
    assert!(text.contains("\"strategy\": \"aggregate\""));
    assert!(dir10.join("infer.config.toml").is_file());

    let first: Vec<PredictionRecord> = read_json(&run.join("infer/test-aggregate-h10-k5/predictions.json"));
    infer(&["--strategy", "aggregate", "--H", "10", "--K", "5", "--limit", "20", "--threads", "3"]);
    let threaded: Vec<PredictionRecord> = read_json(&dir10.join("predictions.json"));
    assert_eq!(first, threaded);

    let table = in_run(dir.path(), &cfg, &run, &["eval"]);
    assert!(table.contains("baseline single-h1-k1"));
    let report: EvalReport = read_json(&run.join("eval/report.json"));
    assert_eq!(report.rows.len(), 1 + 4 * 4);
    let base = report.row("single-h1-k1").unwrap();
    assert_eq!(base.delta_mpjpe, 0.0);
    for r in &report.rows {
        assert_eq!(r.delta_mpjpe, r.metrics.mpjpe - base.metrics.mpjpe);
    }
    assert_eq!(report.row("aggregate-h1-k2").unwrap().metrics, report.row("single-h1-k2").unwrap().metrics);
    let csv = fs::read_to_string(run.join("eval/per_joint.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 17 * report.rows.len());
}

#[test]
fn model_config_mismatch_is_rejected() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config();
    let run = dir.path().join("run");
    train_pipeline(dir.path(), &cfg, &run, &["--set", "train.epochs=1", "--set", "pretrain.epochs=1"]);
    let out = cli(
        dir.path(),
        &["-c", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap(), "--set", "model.channels=8", "infer"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_logs_repeat_and_resume_matches() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train_pipeline(dir.path(), &cfg, &a, &[]);
    train_pipeline(dir.path(), &cfg, &b, &[]);
    for f in ["logs/pretrain.log", "logs/refine.log", "checkpoints/refine.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = dir.path().join("c");
    in_run(dir.path(), &cfg, &c, &["gen-data"]);
    in_run(dir.path(), &cfg, &c, &["--set", "pretrain.epochs=2", "train", "--stage", "pretrain"]);
    let resumed = in_run(dir.path(), &cfg, &c, &["train", "--stage", "pretrain", "--resume"]);
    assert_eq!(resumed.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 2);
    in_run(dir.path(), &cfg, &c, &["--set", "train.epochs=1", "train", "--stage", "refine"]);
    in_run(dir.path(), &cfg, &c, &["train", "--stage", "refine", "--resume"]);
    for f in ["logs/pretrain.log", "logs/refine.log", "checkpoints/initial.ckpt", "checkpoints/refine.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
    let done = in_run(dir.path(), &cfg, &c, &["train", "--stage", "refine", "--resume"]);
    assert_eq!(done.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 0);
    let fresh = dir.path().join("fresh");
    in_run(dir.path(), &cfg, &fresh, &["gen-data"]);
    let out = cli(
        dir.path(),
        &["-c", cfg.to_str().unwrap(), "--run-dir", fresh.to_str().unwrap(), "train", "--stage", "pretrain", "--resume"],
    );
    assert_eq!(out.status.code(), Some(2));
}

fn offset_records(samples: &[diffrefine::dataset::Sample], d: [f64; 3]) -> Vec<PredictionRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let pose: Vec<[f64; 3]> = s
                .gt
                .joints()
                .iter()
                .enumerate()
                .map(|(j, p)| if j == 0 { *p } else { [p[0] + d[0], p[1] + d[1], p[2] + d[2]] })
                .collect();
            PredictionRecord { id, hypotheses: vec![pose.clone()], final_pose: pose }
        })
        .collect()
}

/// A run directory holding only a two-sample test split.
fn two_sample_run(root: &Path) -> Vec<diffrefine::dataset::Sample> {
    let cam = Camera::default();
    let samples = generate_samples(3, Split::Test, 2, &make_skeleton(), &PoseGenConfig::default(), &cam, 3.0).unwrap();
    fs::create_dir_all(root.join("data")).unwrap();
    dataset_write(root.join("data/test.drpz"), &samples, &cam, 3).unwrap();
    samples
}

#[test]
fn eval_of_ground_truth_is_perfect_and_deltas_are_signed() {
    let dir = tempdir().unwrap();
    let run = dir.path().join("run");
    let samples = two_sample_run(&run);
    let write = |name: &str, recs: &[PredictionRecord]| {
        let p = dir.path().join(name);
        fs::write(&p, serde_json::to_string(recs).unwrap()).unwrap();
        p
    };
    let exact = write("exact.json", &offset_records(&samples, [0.0; 3]));
    let five = write("five.json", &offset_records(&samples, [3.0, 4.0, 0.0]));
    let ten = write("ten.json", &offset_records(&samples, [0.0, 6.0, 8.0]));
    let r = run.to_str().unwrap();
    let table = ok(dir.path(), &["--run-dir", r, "eval", "--predictions", five.to_str().unwrap(), ten.to_str().unwrap(), exact.to_str().unwrap()]);
    let report: EvalReport = read_json(&run.join("eval/report.json"));
    assert_eq!(report.samples, 2);
    assert_eq!(report.baseline, report.rows[0].method);
    // Sixteen non-root joints off by 5 mm and 10 mm; the root is exact.
    let m5 = 16.0 * 5.0 / 17.0;
    let m10 = 16.0 * 10.0 / 17.0;
    let got: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.metrics.mpjpe, r.delta_mpjpe)).collect();
    let want = [(m5, 0.0), (m10, m10 - m5), (0.0, -m5)];
    for ((gm, gd), (wm, wd)) in got.iter().zip(want) {
        assert!((gm - wm).abs() < 1e-9 && (gd - wd).abs() < 1e-9, "{got:?}");
    }
    let exact_row = &report.rows[2].metrics;
    assert_eq!(exact_row.mpjpe, 0.0);
    assert_eq!(exact_row.pck, 100.0);
    assert!(exact_row.p_mpjpe < 1e-9);
    assert!(table.contains("+4.706") && table.contains("-4.706"), "{table}");

    let short = write("short.json", &offset_records(&samples[..1], [0.0; 3]));
    let out = cli(dir.path(), &["--run-dir", r, "eval", "--predictions", short.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let mut recs = offset_records(&samples, [0.0; 3]);
    recs[1].final_pose.pop();
    let bad = write("bad.json", &recs);
    let out = cli(dir.path(), &["--run-dir", r, "eval", "--predictions", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
