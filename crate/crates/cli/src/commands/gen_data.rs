use diffrefine::dataset::{dataset_write, generate_samples, Split};
use diffrefine::skeleton::make_skeleton;

use crate::config::{RunConfig, SplitName};
use crate::error::{at_path, CliResult};
use crate::run_dir::{create_parent, RunDir};

/// Sample counts written per split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenSummary {
    pub counts: Vec<(SplitName, usize)>,
}

/// Writes the train, val and test datasets; each split draws from its own streams.
pub fn run(cfg: &RunConfig, run: &RunDir) -> CliResult<GenSummary> {
    let skeleton = make_skeleton();
    let d = &cfg.data;
    let splits = [
        (SplitName::Train, Split::Train, d.train_samples),
        (SplitName::Val, Split::Val, d.val_samples),
        (SplitName::Test, Split::Test, d.test_samples),
    ];
    let mut counts = Vec::new();
    for (name, split, count) in splits {
        let samples = generate_samples(cfg.seed, split, count, &skeleton, &d.pose, &d.camera, d.detector_sigma)?;
        let path = run.dataset(name);
        create_parent(&path)?;
        dataset_write(&path, &samples, &d.camera, cfg.seed).map_err(at_path(&path))?;
        log::info!("wrote {} {} samples to {}", count, name.name(), path.display());
        counts.push((name, count));
    }
    run.dump_config(&run.root().join("data"), "gen-data", cfg)?;
    Ok(GenSummary { counts })
}
