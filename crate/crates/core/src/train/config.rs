use crate::config::{parse_bool, parse_list, parse_value, ConfigSection, KvConfig};
use crate::error::{Error, Result};

use super::LossWeights;

/// Episodic training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    /// Refinement iterations unrolled during training.
    pub train_steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many episodes; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub image_size: usize,
    pub fold: usize,
    pub n_folds: usize,
    /// Validation on train-class episodes every this many episodes; 0 disables.
    pub val_every: usize,
    pub val_episodes: usize,
    pub grad_clip: f64,
    /// Parameter groups kept at their initial values.
    pub frozen_groups: Vec<String>,
    /// Train only on images with no pixel of a test class.
    pub exclude_test_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 6000,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            train_steps: 3,
            seed: 0,
            checkpoint_every: 0,
            image_size: 64,
            fold: 0,
            n_folds: 4,
            val_every: 0,
            val_episodes: 50,
            grad_clip: 1.0,
            frozen_groups: Vec::new(),
            exclude_test_images: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.episodes == 0 || self.train_steps == 0 || self.image_size == 0 || self.n_folds == 0 {
            return bad("episodes, train_steps, image_size and n_folds must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("need lr > 0, weight_decay >= 0 and 0 <= momentum < 1");
        }
        let w = self.loss_weights;
        if w.query < 0.0 || w.support < 0.0 || w.aux < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.fold >= self.n_folds {
            return bad("fold must be below n_folds");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be non-negative");
        }
        if let Some(g) = self.frozen_groups.iter().find(|g| !crate::params::GROUPS.contains(&g.as_str())) {
            return Err(Error::Config(format!("frozen_groups: unknown group {g:?}")));
        }
        Ok(())
    }
}

impl ConfigSection for TrainConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "episodes" => self.episodes = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "w_query" => self.loss_weights.query = parse_value(key, value)?,
            "w_support" => self.loss_weights.support = parse_value(key, value)?,
            "w_aux" => self.loss_weights.aux = parse_value(key, value)?,
            "train_steps" => self.train_steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "fold" => self.fold = parse_value(key, value)?,
            "n_folds" => self.n_folds = parse_value(key, value)?,
            "val_every" => self.val_every = parse_value(key, value)?,
            "val_episodes" => self.val_episodes = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "frozen_groups" => self.frozen_groups = parse_list(key, value)?,
            "exclude_test_images" => self.exclude_test_images = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("episodes", self.episodes.to_string());
        kv.set("lr", self.lr.to_string());
        kv.set("momentum", self.momentum.to_string());
        kv.set("weight_decay", self.weight_decay.to_string());
        kv.set("w_query", self.loss_weights.query.to_string());
        kv.set("w_support", self.loss_weights.support.to_string());
        kv.set("w_aux", self.loss_weights.aux.to_string());
        kv.set("train_steps", self.train_steps.to_string());
        kv.set("seed", self.seed.to_string());
        kv.set("checkpoint_every", self.checkpoint_every.to_string());
        kv.set("image_size", self.image_size.to_string());
        kv.set("fold", self.fold.to_string());
        kv.set("n_folds", self.n_folds.to_string());
        kv.set("val_every", self.val_every.to_string());
        kv.set("val_episodes", self.val_episodes.to_string());
        kv.set("grad_clip", self.grad_clip.to_string());
        kv.set("frozen_groups", self.frozen_groups.join(","));
        kv.set("exclude_test_images", self.exclude_test_images.to_string());
        kv
    }
}
