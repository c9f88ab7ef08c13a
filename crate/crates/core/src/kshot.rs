//! k-shot inference: support-pair finetuning and probability fusion.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::{parse_bool, parse_list, parse_value, ConfigSection, KvConfig, ModelConfig};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::eval::{pair_probabilities, predict_probabilities, ProbMap};
use crate::model::encode_nodes;
use crate::params::{ModelParams, GROUPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{breakdown, loss_nodes, pair_nodes_from_features, support_input, LossBreakdown, LossWeights, Sgd, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairPolicy {
    /// Draw a pair uniformly at random each iteration.
    Random,
    /// Visit pairs in enumeration order, wrapping around.
    Cycle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient norm clip, as in training; 0 disables.
    pub grad_clip: f64,
    pub policy: PairPolicy,
    /// Include (i, i) pairs, giving k² instead of k(k-1).
    pub self_pairs: bool,
    pub frozen_groups: Vec<String>,
    pub steps: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl FinetuneConfig {
    /// 50 iterations at a tenth of the training learning rate.
    pub fn from_train(tc: &TrainConfig) -> Self {
        Self {
            iterations: 50,
            lr: tc.lr / 10.0,
            momentum: tc.momentum,
            weight_decay: tc.weight_decay,
            grad_clip: tc.grad_clip,
            policy: PairPolicy::Random,
            self_pairs: false,
            frozen_groups: vec!["encoder".to_string()],
            steps: tc.train_steps,
            loss_weights: tc.loss_weights,
            seed: tc.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("finetune iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("finetune lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("finetune grad clip must be non-negative, got {}", self.grad_clip)));
        }
        if let Some(g) = self.frozen_groups.iter().find(|g| !GROUPS.contains(&g.as_str())) {
            return Err(Error::Config(format!("unknown parameter group {g:?}; expected one of {GROUPS:?}")));
        }
        if self.steps < 1 {
            return Err(Error::Config("finetune refinement steps must be at least 1".into()));
        }
        Ok(())
    }
}

impl ConfigSection for FinetuneConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "finetune_iterations" => self.iterations = parse_value(key, value)?,
            "finetune_lr" => self.lr = parse_value(key, value)?,
            "finetune_grad_clip" => self.grad_clip = parse_value(key, value)?,
            "finetune_self_pairs" => self.self_pairs = parse_bool(key, value)?,
            "finetune_frozen" => self.frozen_groups = parse_list(key, value)?,
            "finetune_policy" => {
                self.policy = match value {
                    "random" => PairPolicy::Random,
                    "cycle" => PairPolicy::Cycle,
                    _ => return Err(Error::Config(format!("{key}: expected random or cycle, got {value:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("finetune_iterations", self.iterations.to_string());
        kv.set("finetune_lr", self.lr.to_string());
        kv.set("finetune_grad_clip", self.grad_clip.to_string());
        kv.set("finetune_self_pairs", self.self_pairs.to_string());
        kv.set("finetune_frozen", self.frozen_groups.join(","));
        kv.set("finetune_policy", if self.policy == PairPolicy::Random { "random" } else { "cycle" });
        kv
    }
}

/// Ordered `(support, pseudo-query)` index pairs over `k` supports.
pub fn pair_indices(k: usize, self_pairs: bool) -> Result<Vec<(usize, usize)>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "support-pair finetuning needs k >= 2, got k = {k}; use fusion for 1-shot"
        )));
    }
    Ok((0..k).flat_map(|i| (0..k).map(move |j| (i, j))).filter(|(i, j)| self_pairs || i != j).collect())
}

/// Ordered pairs of support images; both members share the target class.
pub fn make_pairs(support: &[ImageSample], self_pairs: bool) -> Result<Vec<(ImageSample, ImageSample)>> {
    let idx = pair_indices(support.len(), self_pairs)?;
    let class = support[0].class_of_interest;
    if let Some(s) = support.iter().find(|s| s.class_of_interest != class) {
        return Err(Error::InvalidInput(format!(
            "supports disagree on the target class ({class} vs {})",
            s.class_of_interest
        )));
    }
    Ok(idx.into_iter().map(|(i, j)| (support[i].clone(), support[j].clone())).collect())
}

/// Encoder features of one image as a `[1, C, h, w]` tensor.
fn encode_one<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, image: &ImageSample) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let x = g.input(crate::model::image_batch(&[image], cfg)?);
    let f = encode_nodes(&mut g, &p, cfg, x)?;
    Ok(g.value(f).clone())
}

/// Adapt a private copy of `params` on pairs drawn from `support`. Groups
/// in `fc.frozen_groups` are returned bit-identical. Returns the adapted
/// parameters and the per-iteration losses.
pub fn finetune<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    support: &[ImageSample],
    fc: &FinetuneConfig,
) -> Result<(ModelParams<T>, Vec<LossBreakdown>)> {
    fc.validate()?;
    let pairs = pair_indices(support.len(), fc.self_pairs)?;
    let (h, w) = (support[0].height, support[0].width);
    let support: Vec<ImageSample> = support.iter().map(|s| s.resized(h, w)).collect();
    let frozen: Vec<&str> = fc.frozen_groups.iter().map(String::as_str).collect();
    let encoder_frozen = frozen.contains(&"encoder");

    // With a frozen encoder the features of every image are fixed, so they
    // are computed once: masked for the support role, plain for the query role.
    let cached: Option<Vec<(Tensor<T>, Tensor<T>)>> = if encoder_frozen {
        let mut v = Vec::with_capacity(support.len());
        for s in &support {
            v.push((encode_one(params, cfg, &support_input(s, cfg))?, encode_one(params, cfg, s)?));
        }
        Some(v)
    } else {
        None
    };

    let mut adapted = params.clone();
    let mut opt = Sgd::new(fc.lr, fc.momentum, fc.weight_decay);
    opt.clip_norm = fc.grad_clip;
    let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
    let mut losses = Vec::with_capacity(fc.iterations);
    for it in 0..fc.iterations {
        let (i, j) = match fc.policy {
            PairPolicy::Random => pairs[rng.random_range(0..pairs.len())],
            PairPolicy::Cycle => pairs[it % pairs.len()],
        };
        let (s, q) = (&support[i], &support[j]);
        let mut g = Graph::new();
        let p = adapted.bind(&mut g, &frozen);
        let nodes = match &cached {
            Some(c) => {
                let feats = g.input(Tensor::cat_batch(&[&c[i].0, &c[j].1])?);
                pair_nodes_from_features(&mut g, &p, cfg, feats, s, q, true, fc.steps)?
            }
            None => crate::train::pair_nodes(&mut g, &p, cfg, s, q, true, fc.steps)?,
        };
        let l = loss_nodes(&mut g, &nodes, &s.target(), &q.target(), fc.loss_weights)?;
        let report = breakdown(&g, &l, fc.loss_weights);
        if !report.is_finite() {
            return Err(Error::Diverged { episode: it, seed: fc.seed, msg: format!("finetune loss {report:?}") });
        }
        let grads = g.backward(l.total)?;
        opt.step(&mut adapted, &grads, &p, &frozen);
        losses.push(report);
    }
    Ok((adapted, losses))
}

/// Average of per-support query probabilities, argmax with background
/// winning ties.
pub fn fuse_predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    support: &[ImageSample],
    query: &ImageSample,
    steps: usize,
) -> Result<Vec<bool>> {
    Ok(fuse_probabilities(params, cfg, support, query, steps)?.binarize())
}

pub fn fuse_probabilities<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    support: &[ImageSample],
    query: &ImageSample,
    steps: usize,
) -> Result<ProbMap> {
    predict_probabilities(params, cfg, support, query, &[1.0], steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KshotMode {
    Fusion,
    Finetune,
    FinetuneFusion,
}

impl FromStr for KshotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Self::Fusion),
            "finetune" => Ok(Self::Finetune),
            "finetune+fusion" | "finetune_fusion" => Ok(Self::FinetuneFusion),
            _ => Err(Error::Config(format!("unknown k-shot mode {s:?}; expected fusion, finetune or finetune+fusion"))),
        }
    }
}

impl fmt::Display for KshotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fusion => "fusion",
            Self::Finetune => "finetune",
            Self::FinetuneFusion => "finetune+fusion",
        })
    }
}

/// Query probabilities under a k-shot `mode`, averaged over `scales`.
pub fn kshot_probabilities<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    support: &[ImageSample],
    query: &ImageSample,
    mode: KshotMode,
    fc: &FinetuneConfig,
    scales: &[f64],
    steps: usize,
) -> Result<ProbMap> {
    match mode {
        KshotMode::Fusion => predict_probabilities(params, cfg, support, query, scales, steps),
        KshotMode::Finetune | KshotMode::FinetuneFusion => {
            if support.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "mode {mode} needs k >= 2 (got k = {}); use fusion",
                    support.len()
                )));
            }
            let (adapted, _) = finetune(params, cfg, support, fc)?;
            let refs = if mode == KshotMode::Finetune { &support[..1] } else { support };
            predict_probabilities(&adapted, cfg, refs, query, scales, steps)
        }
    }
}

/// Binary query mask under a k-shot `mode` at a single scale.
pub fn kshot_predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    support: &[ImageSample],
    query: &ImageSample,
    mode: KshotMode,
    fc: &FinetuneConfig,
    steps: usize,
) -> Result<Vec<bool>> {
    Ok(kshot_probabilities(params, cfg, support, query, mode, fc, &[1.0], steps)?.binarize())
}

/// Single-pair query mask (the k = 1 reference).
pub fn pair_predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    support: &ImageSample,
    query: &ImageSample,
    steps: usize,
) -> Result<Vec<bool>> {
    Ok(pair_probabilities(params, cfg, support, query, steps)?.binarize())
}
