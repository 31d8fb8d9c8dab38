use std::fs;

use diffrefine::model::checkpoint::{load_checkpoint_for, save_checkpoint, Checkpoint};
use diffrefine::model::{ModelParams, RefineModel, INITIAL_PREFIX};
use diffrefine::rng::mix;
use diffrefine::skeleton::make_skeleton;
use diffrefine::train::{pretrain_initial, train_refine, EpochLog, OptimizerState};

use crate::config::{RunConfig, SplitName};
use crate::error::{at_path, CliError, CliResult};
use crate::run_dir::{create_parent, require, RunDir, StageName};

use super::load_split;

/// Trains one stage and writes its checkpoint after every epoch, so an
/// interrupted run can continue with `resume`. Returns the epochs run now.
pub fn run(cfg: &RunConfig, run: &RunDir, stage: StageName, resume: bool) -> CliResult<Vec<EpochLog>> {
    let ckpt_path = run.checkpoint(stage);
    let log_path = run.train_log(stage);
    require(&run.dataset(SplitName::Train), "train dataset")?;
    require(&run.dataset(SplitName::Val), "val dataset")?;
    if stage == StageName::Refine {
        require(&run.checkpoint(StageName::Pretrain), "initial predictor checkpoint (run `train --stage pretrain` first)")?;
    }
    if resume {
        require(&ckpt_path, &format!("{} checkpoint to resume from", stage.name()))?;
    }
    let tcfg = match stage {
        StageName::Pretrain => cfg.pretrain_config(),
        StageName::Refine => cfg.train_config(),
    };
    let skeleton = make_skeleton();
    let sched = cfg.schedule()?;
    let train = load_split(run, SplitName::Train, 0)?;
    let val = load_split(run, SplitName::Val, 0)?;

    let (mut model, mut opt, mut log_text) = if resume {
        let ck = load_checkpoint_for(&ckpt_path, &cfg.model).map_err(at_path(&ckpt_path))?;
        let opt = ck
            .optimizer
            .ok_or_else(|| CliError::data(format!("{}: checkpoint has no optimizer state", ckpt_path.display())))?;
        let model = RefineModel::new(ck.config, ck.params, ck.norm, &skeleton)?;
        let kept = kept_log_lines(&log_path, opt.epochs_done as usize)?;
        (model, opt, kept)
    } else {
        let mut params = ModelParams::init(&cfg.model, mix(&[cfg.seed, 0x1417]))?;
        let mut norm = cfg.normalization(&train.camera);
        if stage == StageName::Refine {
            let init_path = run.checkpoint(StageName::Pretrain);
            let init = load_checkpoint_for(&init_path, &cfg.model).map_err(at_path(&init_path))?;
            params.copy_prefix_from(&init.params, INITIAL_PREFIX);
            norm = init.norm;
        }
        let opt = OptimizerState::new(&params);
        (RefineModel::new(cfg.model.clone(), params, norm, &skeleton)?, opt, String::new())
    };
    create_parent(&ckpt_path)?;
    create_parent(&log_path)?;
    fs::write(&log_path, &log_text).map_err(at_path(&log_path))?;

    let mut hook = |log: &EpochLog, m: &RefineModel, o: &OptimizerState| -> diffrefine::Result<()> {
        log_text.push_str(&format!("{log}\n"));
        fs::write(&log_path, &log_text)?;
        let ck = Checkpoint { config: m.config.clone(), norm: m.norm, params: m.params.clone(), optimizer: Some(o.clone()) };
        save_checkpoint(&ckpt_path, &ck)
    };
    let logs = match stage {
        StageName::Pretrain => pretrain_initial(&mut model, &mut opt, &train.samples, &val.samples, &sched, &tcfg, &mut hook)?,
        StageName::Refine => train_refine(&mut model, &mut opt, &train.samples, &val.samples, &sched, &tcfg, &mut hook)?,
    };
    if logs.is_empty() && !ckpt_path.is_file() {
        let ck = Checkpoint { config: model.config.clone(), norm: model.norm, params: model.params.clone(), optimizer: Some(opt) };
        save_checkpoint(&ckpt_path, &ck).map_err(at_path(&ckpt_path))?;
    }
    run.dump_config(&run.root().join("checkpoints"), &format!("train-{}", stage.name()), cfg)?;
    Ok(logs)
}

/// The first `epochs` lines of an existing log; later lines belong to epochs
/// that will be re-run.
fn kept_log_lines(path: &std::path::Path, epochs: usize) -> CliResult<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(at_path(path)(e)),
    };
    let lines: Vec<&str> = text.lines().take(epochs).collect();
    if lines.len() < epochs {
        return Err(CliError::data(format!(
            "{}: log has {} lines, checkpoint has {epochs} epochs",
            path.display(),
            lines.len()
        )));
    }
    Ok(lines.iter().map(|l| format!("{l}\n")).collect())
}
