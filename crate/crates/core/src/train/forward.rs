//! Full pair pipeline: background masking, encoding, cross-reference,
//! foreground pooling, condition and recurrent refinement for both
//! branches, with outputs upsampled to image resolution.

use crate::autograd::{Graph, NodeId};
use crate::config::ModelConfig;
use crate::data::{Episode, ImageSample};
use crate::error::{Error, Result};
use crate::model::{
    co_occurrence_nodes, condition_nodes, cross_reference_nodes, encode_nodes, image_batch, mask_background,
    pool_weights,
};
use crate::params::{ModelParams, ParamNodes};
use crate::refine::refine_nodes;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source of `[C, h, w]` encoder features computed outside the network,
/// e.g. a pretrained backbone. Output must match
/// [`ModelConfig::feature_channels`] at stride 8.
pub trait FeatureExtractor<T: Scalar> {
    fn extract(&self, image: &ImageSample) -> Result<Tensor<T>>;
}

/// Graph nodes of one pair forward pass. Batch index 0 is the support
/// branch, index 1 the query branch; all tensors are `[2, 2, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct PairNodes {
    pub logits: NodeId,
    pub aux: Option<NodeId>,
}

/// Values of [`PairNodes`], each `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutputs<T> {
    pub logits_q: Tensor<T>,
    pub logits_s: Tensor<T>,
    pub aux_logits_q: Option<Tensor<T>>,
    pub aux_logits_s: Option<Tensor<T>>,
}

fn split_pair<T: Scalar>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let shape = &t.shape()[1..];
    let a = Tensor::from_vec(shape, t.item(0).to_vec()).expect("pair item");
    let b = Tensor::from_vec(shape, t.item(1).to_vec()).expect("pair item");
    (a, b)
}

impl<T: Scalar> EpisodeOutputs<T> {
    pub fn from_graph(g: &Graph<T>, nodes: &PairNodes) -> Self {
        let (logits_s, logits_q) = split_pair(g.value(nodes.logits));
        let (aux_s, aux_q) = match nodes.aux {
            Some(a) => {
                let (s, q) = split_pair(g.value(a));
                (Some(s), Some(q))
            }
            None => (None, None),
        };
        Self { logits_q, logits_s, aux_logits_q: aux_q, aux_logits_s: aux_s }
    }
}

/// Support branch input after optional background masking.
pub fn support_input(support: &ImageSample, cfg: &ModelConfig) -> ImageSample {
    if cfg.mask_support_input {
        mask_background(support, cfg.norm_mean)
    } else {
        support.clone()
    }
}

/// Pipeline after the encoder. `feats` is `[2, C, h, w]`.
///
/// The query branch is conditioned on the support's category vector. The
/// support branch is conditioned on the query's vector when
/// `query_labelled`, otherwise on its own.
pub fn pair_nodes_from_features<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    feats: NodeId,
    support: &ImageSample,
    query: &ImageSample,
    query_labelled: bool,
    steps: usize,
) -> Result<PairNodes> {
    let (_, c, h, w) = g.value(feats).nchw()?;
    if c != cfg.feature_channels() {
        return Err(Error::Shape(format!("encoder produced {c} channels, expected {}", cfg.feature_channels())));
    }
    let (gated, aux) = if cfg.use_cross_reference {
        let (gated, _) = cross_reference_nodes(g, p, cfg, feats)?;
        let aux = co_occurrence_nodes(g, p, cfg, gated)?;
        (gated, Some(aux))
    } else {
        (feats, None)
    };
    let vectors = if cfg.use_condition {
        if !support.mask.contains(support.class_of_interest) {
            return Err(Error::InvalidInput("support mask lacks the target class".into()));
        }
        let mut weights = pool_weights::<T>(&support.mask, support.class_of_interest, h, w);
        let cross = query_labelled && query.mask.contains(query.class_of_interest);
        if cross {
            weights.extend(pool_weights::<T>(&query.mask, query.class_of_interest, h, w));
        } else {
            weights.extend(std::iter::repeat_n(T::zero(), h * w));
        }
        let pooled = g.weighted_pool(gated, weights)?;
        let cv_s = g.select(pooled, 0)?;
        let for_support = if cross { g.select(pooled, 1)? } else { cv_s };
        Some(g.concat(&[for_support, cv_s], 0)?)
    } else {
        None
    };
    let cond = condition_nodes(g, p, cfg, gated, vectors)?;
    let refine_in = g.concat(&[cond, gated], 1)?;
    let (logits, _) = refine_nodes(g, p, cfg, refine_in, steps)?;
    let (oh, ow) = (query.height, query.width);
    let logits = g.bilinear(logits, oh, ow)?;
    let aux = match aux {
        Some(a) => Some(g.bilinear(a, oh, ow)?),
        None => None,
    };
    Ok(PairNodes { logits, aux })
}

/// Record the full pair pipeline on `g`.
pub fn pair_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    support: &ImageSample,
    query: &ImageSample,
    query_labelled: bool,
    steps: usize,
) -> Result<PairNodes> {
    if (support.height, support.width) != (query.height, query.width) {
        return Err(Error::InvalidInput("support and query must share one size".into()));
    }
    let s_in = support_input(support, cfg);
    let batch = image_batch(&[&s_in, query], cfg)?;
    let x = g.input(batch);
    let feats = encode_nodes(g, p, cfg, x)?;
    pair_nodes_from_features(g, p, cfg, feats, support, query, query_labelled, steps)
}

fn single_support(episode: &Episode) -> Result<&ImageSample> {
    if episode.support.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "pair forward needs k = 1, got k = {} (use the k-shot adapter)",
            episode.support.len()
        )));
    }
    Ok(&episode.support[0])
}

/// Forward pass of a 1-shot episode with a labelled query.
pub fn forward_episode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    episode: &Episode,
    steps: usize,
) -> Result<EpisodeOutputs<T>> {
    let support = single_support(episode)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let nodes = pair_nodes(&mut g, &p, cfg, support, &episode.query, true, steps)?;
    Ok(EpisodeOutputs::from_graph(&g, &nodes))
}

/// Same as [`forward_episode`] with features from an external extractor.
pub fn forward_episode_with_extractor<T: Scalar, E: FeatureExtractor<T>>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    episode: &Episode,
    steps: usize,
    extractor: &E,
) -> Result<EpisodeOutputs<T>> {
    let support = single_support(episode)?;
    let fs = extractor.extract(&support_input(support, cfg))?;
    let fq = extractor.extract(&episode.query)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let feats = g.input(Tensor::stack(&[&fs, &fq])?);
    let nodes = pair_nodes_from_features(&mut g, &p, cfg, feats, support, &episode.query, true, steps)?;
    Ok(EpisodeOutputs::from_graph(&g, &nodes))
}
