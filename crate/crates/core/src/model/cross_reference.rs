//! Cross-reference gating and the co-occurrence decoder head.
//!
//! Both branches are pooled to a channel descriptor, mapped through a
//! two-layer MLP and a sigmoid, and the two importance vectors are
//! multiplied. The product re-weights the channels of both feature maps, so
//! only channels active in both images stay strong.

use rand::Rng;

use super::layers::{conv, conv_relu, linear};
use crate::autograd::{ConvGeom, Graph, NodeId};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{ParamBuilder, ParamNodes};
use crate::scalar::Scalar;

fn mlp_prefixes(cfg: &ModelConfig) -> Vec<&'static str> {
    if cfg.share_fc {
        vec!["cross_reference.fc"]
    } else {
        vec!["cross_reference.fc_support", "cross_reference.fc_query"]
    }
}

pub(crate) fn declare<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    b: &mut ParamBuilder<'_, T, R>,
) -> Result<()> {
    let c = cfg.feature_channels();
    let hidden = cfg.gate_hidden();
    for prefix in mlp_prefixes(cfg) {
        b.linear(&format!("{prefix}1"), hidden, c)?;
        b.linear(&format!("{prefix}2"), c, hidden)?;
    }
    let w = cfg.width;
    b.conv("decoder.conv_in", w, c, 3, 3)?;
    for (i, _) in cfg.aspp_rates.iter().enumerate() {
        b.conv(&format!("decoder.aspp{i}"), w, w, 3, 3)?;
    }
    b.conv("decoder.project", w, w, 1, 1)?;
    b.conv_with_std("decoder.out", 2, w, 3, 3, 0.01)?;
    Ok(())
}

fn importance<T: Scalar>(g: &mut Graph<T>, p: &ParamNodes, prefix: &str, pooled: NodeId) -> Result<NodeId> {
    let h = linear(g, p, &format!("{prefix}1"), pooled)?;
    let h = g.relu(h);
    let o = linear(g, p, &format!("{prefix}2"), h)?;
    Ok(g.sigmoid(o))
}

/// `feats` is `[2, C, h, w]` with the support at index 0. Returns the gated
/// features (same shape) and the `[2, C]` gate, whose two rows are equal.
pub fn cross_reference_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    feats: NodeId,
) -> Result<(NodeId, NodeId)> {
    let pooled = g.global_avg_pool(feats)?;
    let scores = match &mlp_prefixes(cfg)[..] {
        [shared] => importance(g, p, shared, pooled)?,
        [support, query] => {
            let ps = g.select(pooled, 0)?;
            let pq = g.select(pooled, 1)?;
            let s = importance(g, p, support, ps)?;
            let q = importance(g, p, query, pq)?;
            g.concat(&[s, q], 0)?
        }
        _ => unreachable!(),
    };
    let gate = g.batch_product(scores)?;
    let gated = g.scale_channels(feats, gate)?;
    Ok((gated, gate))
}

/// Decoder shared by both branches: conv, parallel dilated convs summed and
/// projected, then a two-channel (background, foreground) conv.
pub fn co_occurrence_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    gated: NodeId,
) -> Result<NodeId> {
    let x = conv_relu(g, p, "decoder.conv_in", gated, ConvGeom::same(3, 1))?;
    let mut acc: Option<NodeId> = None;
    for (i, &rate) in cfg.aspp_rates.iter().enumerate() {
        let b = conv_relu(g, p, &format!("decoder.aspp{i}"), x, ConvGeom::same(3, rate))?;
        acc = Some(match acc {
            None => b,
            Some(a) => g.add(a, b)?,
        });
    }
    let merged = acc.expect("at least one rate");
    let y = conv_relu(g, p, "decoder.project", merged, ConvGeom::pointwise())?;
    conv(g, p, "decoder.out", y, ConvGeom::same(3, 1))
}
