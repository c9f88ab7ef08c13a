use std::fs;
use std::path::Path;

use crnet::data::{generate_synthetic, load_layout, make_folds, write_layout, DatasetIndex};
use crnet::eval::{cross_validate, evaluate_fold, fold_checkpoint_path, CrossValReport};
use crnet::train::{run_config, train, Checkpoint, TrainIo, CHECKPOINT_FILE, METRICS_FILE};
use crnet::{Error, Result};

use crate::settings::Settings;
use crate::{Cli, Command};

/// Configuration mistakes are usage errors; everything else is a runtime
/// failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut s = Settings::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        s.apply_pair("seed", seed)?;
    }
    match cli.command {
        Command::Synth { out, force, instances } => {
            if let Some(n) = instances {
                s.apply_pair("instances_per_class", n)?;
            }
            synth(&s, &out, force)
        }
        Command::Train { data, out, fold, all_folds, episodes, resume } => {
            if let Some(f) = fold {
                s.apply_pair("fold", f)?;
            }
            if let Some(n) = episodes {
                s.apply_pair("episodes", n)?;
            }
            let folds: Vec<usize> = if all_folds { (0..s.train.n_folds).collect() } else { vec![s.train.fold] };
            for f in folds {
                s.apply_pair("fold", f)?;
                train_fold(&s, &data, &out, resume)?;
            }
            Ok(())
        }
        Command::Eval { data, run, out, name, fold, scales, refine_steps, kshot, mode, workers, episodes } => {
            let flags = [
                ("scales", scales),
                ("refine_steps", refine_steps.map(|v| v.to_string())),
                ("kshot", kshot.map(|v| v.to_string())),
                ("mode", mode),
                ("workers", workers.map(|v| v.to_string())),
                ("eval_episodes", episodes.map(|v| v.to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    s.apply_pair(k, v)?;
                }
            }
            s.finish();
            s.eval.validate()?;
            let out = out.unwrap_or_else(|| run.clone());
            evaluate(&s, &data, &run, &out, &name, fold)
        }
        Command::Plot { run, report, out } => crate::plot::render(&run, report.as_deref(), &out),
    }
}

fn synth(s: &Settings, out: &Path, force: bool) -> Result<()> {
    let index = generate_synthetic(&s.synth, s.train.seed)?;
    write_layout(&index, out, force)?;
    log::info!(
        "wrote {} images of {} classes to {}",
        index.images.len(),
        index.class_names.len(),
        out.display()
    );
    Ok(())
}

fn load_data(data: &Path, size: usize) -> Result<DatasetIndex> {
    let index = load_layout(data, Some((size, size)))?;
    if index.is_empty() {
        return Err(Error::Dataset { path: data.to_path_buf(), msg: "dataset has no images".into() });
    }
    Ok(index)
}

fn train_fold(s: &Settings, data: &Path, run: &Path, resume: bool) -> Result<()> {
    let tc = &s.train;
    tc.validate()?;
    let index = load_data(data, tc.image_size)?;
    let folds = make_folds(&index.class_ids(), tc.n_folds)?;
    let split = &folds[tc.fold];
    let dir = run.join(format!("fold{}", tc.fold));
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let resume_from = if resume && ckpt_path.is_file() {
        let ck = Checkpoint::<f32>::load(&ckpt_path)?;
        log::info!("fold {}: resuming at episode {}", tc.fold, ck.episodes_done);
        Some(ck)
    } else {
        let metrics = dir.join(METRICS_FILE);
        if metrics.exists() {
            fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
        }
        None
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join("config.txt");
    let mut kv = s.to_kv();
    kv.overlay(&run_config(&s.model, tc));
    fs::write(&cfg_path, kv.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let names: Vec<&str> = split.test_classes.iter().filter_map(|&c| index.class_name(c)).collect();
    log::info!("fold {}: training {} episodes, test classes held out: {}", tc.fold, tc.episodes, names.join(", "));
    let outcome = train::<f32>(tc, &s.model, &index, split, TrainIo { out_dir: Some(dir.clone()), resume: resume_from })?;
    if let Some(last) = outcome.metrics.last() {
        log::info!("fold {}: done, final loss {:.4} after {:.1}s", tc.fold, last.total, last.wall_time);
    }
    Ok(())
}

fn evaluate(s: &Settings, data: &Path, run: &Path, out: &Path, name: &str, fold: Option<usize>) -> Result<()> {
    let index = load_data(data, s.eval.image_size)?;
    let report = match fold {
        Some(f) => {
            let folds = make_folds(&index.class_ids(), s.train.n_folds)?;
            let split = folds
                .get(f)
                .ok_or_else(|| Error::Config(format!("fold {f} out of range for {} folds", s.train.n_folds)))?;
            let path = fold_checkpoint_path(run, f);
            if !path.is_file() {
                return Err(Error::Checkpoint(format!("fold {f}: no checkpoint at {}", path.display())));
            }
            let ck = Checkpoint::<f32>::load(&path)?;
            CrossValReport::new(vec![evaluate_fold(&ck.params, &ck.model, &index, split, &s.eval)?])
        }
        None => cross_validate(run, &index, s.train.n_folds, &s.eval)?,
    };
    report.write(out, name)?;
    print!("{}", report.to_table());
    Ok(())
}
