//! Foreground average pooling and the condition block.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::layers::conv_relu;
use crate::autograd::{ConvGeom, Graph, NodeId};
use crate::config::ModelConfig;
use crate::data::{ClassId, ImageSample, LabelMap};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamNodes};
use crate::scalar::Scalar;

static EMPTY_FOREGROUND: AtomicUsize = AtomicUsize::new(0);

/// Number of pooling calls whose class region vanished after downsampling.
pub fn empty_foreground_warnings() -> usize {
    EMPTY_FOREGROUND.load(Ordering::Relaxed)
}

pub(crate) fn declare<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    b: &mut ParamBuilder<'_, T, R>,
) -> Result<()> {
    let c = cfg.feature_channels();
    let cin = if cfg.use_condition { 2 * c } else { c };
    b.conv("condition.fuse", cfg.width, cin, 3, 3)?;
    b.conv("condition.res1", cfg.width, cfg.width, 3, 3)?;
    b.conv("condition.res2", cfg.width, cfg.width, 3, 3)?;
    Ok(())
}

/// Per-position pooling weights for one mask at feature resolution:
/// `1/count` on class pixels of the nearest-neighbour downsampled mask.
/// An empty region yields all zeros and bumps the warning counter.
pub fn pool_weights<T: Scalar>(mask: &LabelMap, class: ClassId, h: usize, w: usize) -> Vec<T> {
    let small = mask.resize_nearest(h, w);
    let count = small.count(class);
    if count == 0 {
        EMPTY_FOREGROUND.fetch_add(1, Ordering::Relaxed);
        log::warn!("class {class} vanished when downsampling a {}x{} mask to {h}x{w}", mask.height, mask.width);
        return vec![T::zero(); h * w];
    }
    let inv = T::one() / T::of(count as f64);
    small.labels.iter().map(|&l| if l == class.0 { inv } else { T::zero() }).collect()
}

/// `feats` is `[n, C, h, w]`, `weights` stacks [`pool_weights`] per item.
pub fn foreground_pool_nodes<T: Scalar>(
    g: &mut Graph<T>,
    feats: NodeId,
    weights: Vec<T>,
) -> Result<NodeId> {
    g.weighted_pool(feats, weights)
}

/// Concatenate the tiled category vector onto the features and apply a
/// residual convolution block. `vectors` is `[n, C]` or `None` when the
/// condition input is ablated.
pub fn condition_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    feats: NodeId,
    vectors: Option<NodeId>,
) -> Result<NodeId> {
    let (_, c, h, w) = g.value(feats).nchw()?;
    let input = match (cfg.use_condition, vectors) {
        (true, Some(v)) => {
            if g.value(v).dim(1) != c {
                return Err(Error::Shape(format!(
                    "category vector width {} does not match {c} feature channels",
                    g.value(v).dim(1)
                )));
            }
            let tiled = g.broadcast(v, h, w)?;
            g.concat(&[feats, tiled], 1)?
        }
        (true, None) => return Err(Error::InvalidInput("condition block needs a category vector".into())),
        (false, _) => feats,
    };
    let x0 = conv_relu(g, p, "condition.fuse", input, ConvGeom::same(3, 1))?;
    let r = conv_relu(g, p, "condition.res1", x0, ConvGeom::same(3, 1))?;
    let r = super::layers::conv(g, p, "condition.res2", r, ConvGeom::same(3, 1))?;
    let sum = g.add(x0, r)?;
    Ok(g.relu(sum))
}

/// Replace every pixel outside the class of interest with `mean_color`.
pub fn mask_background(image: &ImageSample, mean_color: [f32; 3]) -> ImageSample {
    let mut out = image.clone();
    let cls = image.class_of_interest.0;
    for (px, &l) in out.pixels.chunks_exact_mut(3).zip(&image.mask.labels) {
        if l != cls {
            px.copy_from_slice(&mean_color);
        }
    }
    out
}
