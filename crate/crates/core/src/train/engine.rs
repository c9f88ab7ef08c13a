//! Episodic training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::forward::pair_nodes;
use super::loss::{breakdown, loss_nodes, pair_targets, LossBreakdown};
use super::optim::Sgd;
use super::TrainConfig;
use crate::autograd::Graph;
use crate::config::{ConfigSection, KvConfig, ModelConfig};
use crate::data::{sample_episode, DatasetIndex, Episode, FoldSplit, Mode};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub episode_idx: usize,
    pub query_ce: f64,
    pub support_ce: f64,
    pub aux_ce: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub velocity: ModelParams<T>,
    pub episodes_done: usize,
    pub metrics: Vec<MetricRecord>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(&self, model: &ModelConfig, tc: &TrainConfig) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(model.clone(), run_config(model, tc), self.episodes_done, self.params.clone());
        ck.velocity = self.velocity.clone();
        ck
    }
}

/// Where training writes and what it resumes from.
#[derive(Default)]
pub struct TrainIo<T> {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint<T>>,
}

/// Combined model and training configuration; its hash tags checkpoints.
pub fn run_config(model: &ModelConfig, tc: &TrainConfig) -> KvConfig {
    let mut kv = model.to_kv();
    kv.overlay(&tc.to_kv());
    kv
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the RNG that samples training episode `idx`.
pub fn episode_seed(seed: u64, idx: usize) -> u64 {
    splitmix(seed ^ splitmix(idx as u64 + 1))
}

/// Resize every sample of an episode to `size x size` when needed.
pub fn resize_episode(ep: &Episode, size: usize) -> Episode {
    let mut out = ep.clone();
    for s in out.support.iter_mut().chain(std::iter::once(&mut out.query)) {
        if s.height != size || s.width != size {
            *s = s.resized(size, size);
        }
    }
    out
}

/// Forward, loss and backward of one episode, then an optimizer update.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Sgd<T>,
    cfg: &ModelConfig,
    episode: &Episode,
    tc: &TrainConfig,
    frozen: &[&str],
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, frozen);
    let support = &episode.support[0];
    let nodes = pair_nodes(&mut g, &p, cfg, support, &episode.query, true, tc.train_steps)?;
    let (ts, tq) = pair_targets(episode)?;
    let l = loss_nodes(&mut g, &nodes, &ts, &tq, tc.loss_weights)?;
    let report = breakdown(&g, &l, tc.loss_weights);
    if !report.is_finite() {
        return Ok(report);
    }
    let grads = g.backward(l.total)?;
    opt.step(params, &grads, &p, frozen);
    Ok(report)
}

fn append_record(path: &Path, rec: &MetricRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).expect("record serialises");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn dump_divergence(dir: &Path, episode_idx: usize, seed: u64, ep: &Episode, loss: &LossBreakdown) -> Result<()> {
    let path = dir.join(format!("diverged_episode_{episode_idx}.txt"));
    let text = format!(
        "episode_idx = {episode_idx}\nepisode_seed = {seed}\ntarget_class = {}\nimage_ids = {:?}\nloss = {loss:?}\n",
        ep.target_class, ep.image_ids
    );
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Train on episodes of `split`'s train classes.
pub fn train<T: Scalar>(
    tc: &TrainConfig,
    model: &ModelConfig,
    index: &DatasetIndex,
    split: &FoldSplit,
    io: TrainIo<T>,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    model.validate()?;
    let (mut params, velocity, start) = match io.resume {
        Some(ck) => {
            if ck.model != *model {
                return Err(Error::Checkpoint("resume checkpoint has a different model config".into()));
            }
            (ck.params, ck.velocity, ck.episodes_done)
        }
        None => (crate::model::init_params::<T>(model, tc.seed)?, ModelParams::default(), 0),
    };
    let mut opt = Sgd::new(tc.lr, tc.momentum, tc.weight_decay);
    opt.clip_norm = tc.grad_clip;
    opt.velocity = velocity;
    if let Some(dir) = &io.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let filtered;
    let index = if tc.exclude_test_images {
        filtered = index.without_classes(&split.test_classes)?;
        &filtered
    } else {
        index
    };
    let frozen: Vec<&str> = tc.frozen_groups.iter().map(String::as_str).collect();
    let clock = Instant::now();
    let mut metrics = Vec::new();
    for idx in start..tc.episodes {
        let seed = episode_seed(tc.seed, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = resize_episode(&sample_episode(index, split, Mode::Train, 1, &mut rng)?, tc.image_size);
        let loss = train_step(&mut params, &mut opt, model, &ep, tc, &frozen)?;
        if !loss.is_finite() {
            if let Some(dir) = &io.out_dir {
                dump_divergence(dir, idx, seed, &ep, &loss)?;
            }
            return Err(Error::Diverged { episode: idx, seed, msg: format!("{loss:?}") });
        }
        let val_miou = if tc.val_every > 0 && (idx + 1) % tc.val_every == 0 {
            Some(crate::eval::validate_on_train_classes(&params, model, index, split, tc)?)
        } else {
            None
        };
        let rec = MetricRecord {
            episode_idx: idx,
            query_ce: loss.query_ce,
            support_ce: loss.support_ce,
            aux_ce: loss.aux_ce,
            total: loss.total,
            lr: tc.lr,
            wall_time: clock.elapsed().as_secs_f64(),
            val_miou,
        };
        if let Some(dir) = &io.out_dir {
            append_record(&dir.join(METRICS_FILE), &rec)?;
            if tc.checkpoint_every > 0 && (idx + 1) % tc.checkpoint_every == 0 && idx + 1 < tc.episodes {
                let mut ck = Checkpoint::new(model.clone(), run_config(model, tc), idx + 1, params.clone());
                ck.velocity = opt.velocity.clone();
                ck.save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        metrics.push(rec);
    }
    let outcome = TrainOutcome { params, velocity: opt.velocity, episodes_done: tc.episodes.max(start), metrics };
    if let Some(dir) = &io.out_dir {
        outcome.checkpoint(model, tc).save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(outcome)
}
