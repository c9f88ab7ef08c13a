//! Test-fold evaluation and 4-fold cross-validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::IouAccumulator;
use crate::config::{parse_bool, parse_list, parse_value, ConfigSection, KvConfig, ModelConfig};
use crate::data::{make_folds, sample_episode, ClassId, DatasetIndex, Episode, FoldSplit, Mode};
use crate::error::{Error, Result};
use crate::kshot::{kshot_probabilities, FinetuneConfig, KshotMode};
use crate::params::ModelParams;
use crate::refine::DEFAULT_TEST_STEPS;
use crate::scalar::Scalar;
use crate::train::{episode_seed, resize_episode, Checkpoint, TrainConfig, CHECKPOINT_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub k: usize,
    pub mode: KshotMode,
    pub scales: Vec<f64>,
    pub refine_steps: usize,
    pub per_episode: bool,
    pub workers: usize,
    pub image_size: usize,
    pub finetune: FinetuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            seed: 0,
            k: 1,
            mode: KshotMode::Fusion,
            scales: vec![1.0],
            refine_steps: DEFAULT_TEST_STEPS,
            per_episode: false,
            workers: 1,
            image_size: 64,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.k == 0 || self.refine_steps == 0 || self.workers == 0 || self.image_size == 0 {
            return Err(Error::Config(
                "eval_episodes, kshot, refine_steps, workers and image_size must be positive".into(),
            ));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("scales needs at least one value".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("test scale must be positive, got {s}")));
        }
        if self.mode != KshotMode::Fusion && self.k < 2 {
            return Err(Error::Config(format!("mode {} needs kshot >= 2; use fusion for 1-shot", self.mode)));
        }
        self.finetune.validate()
    }
}

impl ConfigSection for EvalConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "eval_episodes" => self.episodes = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "kshot" => self.k = parse_value(key, value)?,
            "mode" => self.mode = value.parse()?,
            "scales" => self.scales = parse_list(key, value)?,
            "refine_steps" => self.refine_steps = parse_value(key, value)?,
            "per_episode_iou" => self.per_episode = parse_bool(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            _ => return self.finetune.set_key(key, value),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = self.finetune.to_kv();
        kv.set("eval_episodes", self.episodes.to_string());
        kv.set("seed", self.seed.to_string());
        kv.set("kshot", self.k.to_string());
        kv.set("mode", self.mode.to_string());
        kv.set("scales", crate::config::join_list(&self.scales));
        kv.set("refine_steps", self.refine_steps.to_string());
        kv.set("per_episode_iou", self.per_episode.to_string());
        kv.set("workers", self.workers.to_string());
        kv.set("image_size", self.image_size.to_string());
        kv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: ClassId,
    pub name: String,
    pub iou: f64,
}

/// Result of evaluating one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub per_class: Vec<ClassResult>,
    pub mean_iou: f64,
    pub fb_iou: f64,
    pub episodes: usize,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_accumulator(fold: usize, acc: &IouAccumulator, index: &DatasetIndex, config: &KvConfig) -> Self {
        let per_class = acc
            .class_ious()
            .into_iter()
            .map(|(class, iou)| ClassResult {
                class,
                name: index.class_name(class).unwrap_or("?").to_string(),
                iou,
            })
            .collect();
        Self {
            fold,
            per_class,
            mean_iou: acc.mean_iou(),
            fb_iou: acc.fb_iou(),
            episodes: acc.episodes,
            config: config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("fold {} ({} episodes)\n", self.fold, self.episodes);
        for c in &self.per_class {
            let _ = writeln!(s, "  {:<16} {:>6.2}", c.name, 100.0 * c.iou);
        }
        let _ = writeln!(s, "  {:<16} {:>6.2}", "mIoU", 100.0 * self.mean_iou);
        let _ = writeln!(s, "  {:<16} {:>6.2}", "FB-IoU", 100.0 * self.fb_iou);
        s
    }
}

/// Per-fold reports and their averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<EvalReport>,
    pub mean_iou: f64,
    pub mean_fb_iou: f64,
}

impl CrossValReport {
    pub fn new(folds: Vec<EvalReport>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_iou = folds.iter().map(|r| r.mean_iou).sum::<f64>() / n;
        let mean_fb_iou = folds.iter().map(|r| r.fb_iou).sum::<f64>() / n;
        Self { folds, mean_iou, mean_fb_iou }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for r in &self.folds {
            s.push_str(&r.to_table());
        }
        let _ = write!(s, "{:<18} ", "fold");
        for r in &self.folds {
            let _ = write!(s, "{:>7}", r.fold);
        }
        let _ = writeln!(s, "{:>7}", "mean");
        let _ = write!(s, "{:<18} ", "mIoU");
        for r in &self.folds {
            let _ = write!(s, "{:>7.2}", 100.0 * r.mean_iou);
        }
        let _ = writeln!(s, "{:>7.2}", 100.0 * self.mean_iou);
        let _ = write!(s, "{:<18} ", "FB-IoU");
        for r in &self.folds {
            let _ = write!(s, "{:>7.2}", 100.0 * r.fb_iou);
        }
        let _ = writeln!(s, "{:>7.2}", 100.0 * self.mean_fb_iou);
        s
    }

    /// Write `<stem>.txt` and `<stem>.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

/// Seed stream of test episodes, distinct from the training stream.
fn test_episode_seed(seed: u64, fold: usize, idx: usize) -> u64 {
    episode_seed(seed ^ 0x7E57_0000_0000_0000 ^ (fold as u64) << 32, idx)
}

/// Prediction and ground truth for one episode.
pub fn evaluate_episode<T: Scalar>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    episode: &Episode,
    ecfg: &EvalConfig,
    finetune_seed: u64,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let fc = FinetuneConfig { seed: finetune_seed, ..ecfg.finetune.clone() };
    let probs = kshot_probabilities(
        params,
        model,
        &episode.support,
        &episode.query,
        ecfg.mode,
        &fc,
        &ecfg.scales,
        ecfg.refine_steps,
    )?;
    Ok((probs.binarize(), episode.query.mask.binary(episode.target_class)))
}

fn run_episodes<T: Scalar>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    index: &DatasetIndex,
    split: &FoldSplit,
    mode: Mode,
    ecfg: &EvalConfig,
    seed_of: impl Fn(usize) -> u64 + Sync,
) -> Result<IouAccumulator> {
    let one = |idx: usize| -> Result<(ClassId, Vec<bool>, Vec<bool>)> {
        let seed = seed_of(idx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = resize_episode(&sample_episode(index, split, mode, ecfg.k, &mut rng)?, ecfg.image_size);
        let (pred, gt) = evaluate_episode(params, model, &ep, ecfg, seed)?;
        Ok((ep.target_class, pred, gt))
    };
    let results: Vec<Result<(ClassId, Vec<bool>, Vec<bool>)>> = if ecfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(ecfg.workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start {} workers: {e}", ecfg.workers)))?;
        pool.install(|| (0..ecfg.episodes).into_par_iter().map(one).collect())
    } else {
        (0..ecfg.episodes).map(one).collect()
    };
    // Merge in episode order so the result does not depend on scheduling.
    let mut acc = IouAccumulator::new(ecfg.per_episode);
    for r in results {
        let (class, pred, gt) = r?;
        acc.add(&pred, &gt, class)?;
    }
    Ok(acc)
}

/// Evaluate `ecfg.episodes` seeded test episodes of `split`.
pub fn evaluate_fold<T: Scalar>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    index: &DatasetIndex,
    split: &FoldSplit,
    ecfg: &EvalConfig,
) -> Result<EvalReport> {
    ecfg.validate()?;
    let acc = run_episodes(params, model, index, split, Mode::Test, ecfg, |i| {
        test_episode_seed(ecfg.seed, split.fold_id, i)
    })?;
    let mut snapshot = model.to_kv();
    snapshot.overlay(&ecfg.to_kv());
    Ok(EvalReport::from_accumulator(split.fold_id, &acc, index, &snapshot))
}

/// Mean IoU on episodes of the split's training classes, used for
/// periodic validation during training.
pub fn validate_on_train_classes<T: Scalar>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    index: &DatasetIndex,
    split: &FoldSplit,
    tc: &TrainConfig,
) -> Result<f64> {
    let ecfg = EvalConfig {
        episodes: tc.val_episodes,
        image_size: tc.image_size,
        refine_steps: DEFAULT_TEST_STEPS,
        ..EvalConfig::default()
    };
    let seed = tc.seed ^ 0x0A11_DA7E;
    let acc = run_episodes(params, model, index, split, Mode::Train, &ecfg, |i| episode_seed(seed, i))?;
    Ok(acc.mean_iou())
}

/// The folds of `index`'s class list.
pub fn dataset_folds(index: &DatasetIndex, n_folds: usize) -> Result<Vec<FoldSplit>> {
    make_folds(&index.class_ids(), n_folds)
}

/// Evaluate every fold with the parameters `load(fold)` returns.
pub fn cross_validate_with<T: Scalar>(
    index: &DatasetIndex,
    n_folds: usize,
    ecfg: &EvalConfig,
    mut load: impl FnMut(usize) -> Result<(ModelConfig, ModelParams<T>)>,
) -> Result<CrossValReport> {
    let mut reports = Vec::with_capacity(n_folds);
    for split in dataset_folds(index, n_folds)? {
        let (model, params) = load(split.fold_id)?;
        reports.push(evaluate_fold(&params, &model, index, &split, ecfg)?);
    }
    Ok(CrossValReport::new(reports))
}

/// Checkpoint location of `fold` under a run directory.
pub fn fold_checkpoint_path(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}")).join(CHECKPOINT_FILE)
}

/// Cross-validate the per-fold checkpoints stored under `run_dir`.
pub fn cross_validate(run_dir: &Path, index: &DatasetIndex, n_folds: usize, ecfg: &EvalConfig) -> Result<CrossValReport> {
    cross_validate_with::<f32>(index, n_folds, ecfg, |fold| {
        let path = fold_checkpoint_path(run_dir, fold);
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("fold {fold}: no checkpoint at {}", path.display())));
        }
        let ck = Checkpoint::<f32>::load(&path)
            .map_err(|e| Error::Checkpoint(format!("fold {fold}: {e}")))?;
        Ok((ck.model, ck.params))
    })
}
