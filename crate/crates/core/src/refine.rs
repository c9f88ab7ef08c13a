//! Recurrent mask refinement.
//!
//! Each step reads the branch features and the confidence cache left by
//! the previous step. The feature branch is a full-resolution conv plus a
//! stride-2 conv that is bilinearly upsampled back; the cache branch is a
//! global convolution block of factorised 1x7 / 7x1 kernels. The combine
//! block merges both and emits two-channel logits, whose softmax becomes the
//! next cache. One parameter copy serves every step.

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, NodeId};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::layers::{conv, conv_relu};
use crate::model::FeatureMap;
use crate::params::{ModelParams, ParamBuilder, ParamNodes};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of refinement steps at test time.
pub const DEFAULT_TEST_STEPS: usize = 5;

/// Per-pixel (background, foreground) probabilities from the last step.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceCache<T> {
    /// `[2, h, w]`; all zeros before the first step.
    pub probs: Tensor<T>,
    pub step_index: usize,
}

/// Condition output concatenated with cross-reference output for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementInput<T> {
    pub features: FeatureMap<T>,
}

pub fn init_cache<T: Scalar>(h: usize, w: usize) -> ConfidenceCache<T> {
    ConfidenceCache { probs: Tensor::zeros(&[2, h, w]), step_index: 0 }
}

pub(crate) fn declare<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    b: &mut ParamBuilder<'_, T, R>,
) -> Result<()> {
    let (rw, cw) = (cfg.refine_width, cfg.cache_width);
    b.conv("refinement.feature", rw, cfg.refine_input_channels(), 3, 3)?;
    b.conv("refinement.down", rw, rw, 3, 3)?;
    let mut combine_in = rw;
    if cfg.use_cache {
        b.conv("refinement.gc_a1", cw, 2, 1, 7)?;
        b.conv("refinement.gc_a2", cw, cw, 7, 1)?;
        b.conv("refinement.gc_b1", cw, 2, 7, 1)?;
        b.conv("refinement.gc_b2", cw, cw, 1, 7)?;
        combine_in += cw;
    }
    b.conv("refinement.combine", rw, combine_in, 3, 3)?;
    b.conv("refinement.res1", rw, rw, 3, 3)?;
    b.conv("refinement.res2", rw, rw, 3, 3)?;
    b.conv_with_std("refinement.out", 2, rw, 3, 3, 0.01)?;
    Ok(())
}

/// Step-invariant feature branch: `[n, Cin, h, w] -> [n, rw, h, w]`.
pub fn feature_branch_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    input: NodeId,
) -> Result<NodeId> {
    let (_, _, h, w) = g.value(input).nchw()?;
    let full = conv_relu(g, p, "refinement.feature", input, ConvGeom::same(3, 1))?;
    let down = conv_relu(g, p, "refinement.down", full, ConvGeom::strided(3, 2))?;
    let up = g.bilinear(down, h, w)?;
    g.add(full, up)
}

fn global_conv_nodes<T: Scalar>(g: &mut Graph<T>, p: &ParamNodes, cache: NodeId) -> Result<NodeId> {
    let a = conv(g, p, "refinement.gc_a1", cache, ConvGeom::rect(1, 7))?;
    let a = conv(g, p, "refinement.gc_a2", a, ConvGeom::rect(7, 1))?;
    let b = conv(g, p, "refinement.gc_b1", cache, ConvGeom::rect(7, 1))?;
    let b = conv(g, p, "refinement.gc_b2", b, ConvGeom::rect(1, 7))?;
    let s = g.add(a, b)?;
    Ok(g.relu(s))
}

/// Combine block: merges the feature branch with the processed cache
/// branch (if any) and emits `[n, 2, h, w]` logits.
pub fn fuse_branches<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    features: NodeId,
    cache_branch: Option<NodeId>,
) -> Result<NodeId> {
    let merged = match cache_branch {
        Some(c) => g.concat(&[features, c], 1)?,
        None => features,
    };
    let x0 = conv_relu(g, p, "refinement.combine", merged, ConvGeom::same(3, 1))?;
    let r = conv_relu(g, p, "refinement.res1", x0, ConvGeom::same(3, 1))?;
    let r = conv(g, p, "refinement.res2", r, ConvGeom::same(3, 1))?;
    let s = g.add(x0, r)?;
    let s = g.relu(s);
    conv(g, p, "refinement.out", s, ConvGeom::same(3, 1))
}

/// One step given the precomputed feature branch and a `[n, 2, h, w]` cache.
pub fn step_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    features: NodeId,
    cache: NodeId,
) -> Result<NodeId> {
    let (_, _, h, w) = g.value(features).nchw()?;
    let (_, cc, ch, cw) = g.value(cache).nchw()?;
    if cc != 2 || (ch, cw) != (h, w) {
        return Err(Error::Shape(format!(
            "cache [{cc}, {ch}, {cw}] does not match features at {h}x{w}"
        )));
    }
    let cache_branch = if cfg.use_cache { Some(global_conv_nodes(g, p, cache)?) } else { None };
    fuse_branches(g, p, features, cache_branch)
}

/// Unrolled refinement from a zero cache. Returns the final logits and
/// the cache probabilities produced after every step.
pub fn refine_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    input: NodeId,
    steps: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    if steps < 1 {
        return Err(Error::InvalidInput("refinement needs at least one step".into()));
    }
    let (n, _, h, w) = g.value(input).nchw()?;
    let features = feature_branch_nodes(g, p, input)?;
    let mut cache = g.input(Tensor::zeros(&[n, 2, h, w]));
    let mut caches = Vec::with_capacity(steps);
    let effective = if cfg.use_cache { steps } else { 1 };
    let mut logits = None;
    for _ in 0..effective {
        let l = step_nodes(g, p, cfg, features, cache)?;
        let probs = g.softmax_channels(l)?;
        caches.push(probs);
        cache = if cfg.cache_stop_grad { g.detach(probs) } else { probs };
        logits = Some(l);
    }
    Ok((logits.expect("at least one step"), caches))
}

fn check_input<T: Scalar>(inp: &RefinementInput<T>, cfg: &ModelConfig) -> Result<()> {
    if inp.features.channels() != cfg.refine_input_channels() {
        return Err(Error::Shape(format!(
            "refinement expects {} channels, got {}",
            cfg.refine_input_channels(),
            inp.features.channels()
        )));
    }
    Ok(())
}

fn batched<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

fn unbatched<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(&t.shape()[1..], t.data().to_vec()).expect("unit batch")
}

/// Single refinement step on values.
pub fn refine_step<T: Scalar>(
    inp: &RefinementInput<T>,
    cache: &ConfidenceCache<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, ConfidenceCache<T>)> {
    check_input(inp, cfg)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let x = g.input(batched(&inp.features.data)?);
    let c = g.input(batched(&cache.probs)?);
    let features = feature_branch_nodes(&mut g, &p, x)?;
    let logits = step_nodes(&mut g, &p, cfg, features, c)?;
    let probs = g.softmax_channels(logits)?;
    Ok((
        unbatched(g.value(logits)),
        ConfidenceCache { probs: unbatched(g.value(probs)), step_index: cache.step_index + 1 },
    ))
}

/// `steps` refinement iterations from a zero cache; returns final logits.
pub fn refine<T: Scalar>(
    inp: &RefinementInput<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    steps: usize,
) -> Result<Tensor<T>> {
    check_input(inp, cfg)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let x = g.input(batched(&inp.features.data)?);
    let (logits, _) = refine_nodes(&mut g, &p, cfg, x, steps)?;
    Ok(unbatched(g.value(logits)))
}
