//! Siamese encoder: four convolutional stages, the first three at stride 2
//! and the last dilated, so the output sits at 1/8 of the input size. With
//! `output_stride = 4` the third stage is dilated as well.

use rand::Rng;

use super::layers::conv_relu;
use crate::autograd::{ConvGeom, Graph, NodeId};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{ParamBuilder, ParamNodes};
use crate::scalar::Scalar;

/// Default spatial reduction between image and feature map.
pub const FEATURE_STRIDE: usize = 8;

pub(crate) fn declare<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    b: &mut ParamBuilder<'_, T, R>,
) -> Result<()> {
    let mut cin = 3;
    for (stage, &w) in cfg.encoder_widths.iter().enumerate() {
        b.conv(&format!("encoder.stage{}.conv0", stage + 1), w, cin, 3, 3)?;
        b.conv(&format!("encoder.stage{}.conv1", stage + 1), w, w, 3, 3)?;
        cin = w;
    }
    Ok(())
}

/// `images` is `[n, 3, h, w]`; returns `[n, C, ceil(h/s), ceil(w/s)]` for
/// `s = cfg.output_stride`.
pub fn encode_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    images: NodeId,
) -> Result<NodeId> {
    let mut x = images;
    let mut taps = Vec::with_capacity(2);
    for stage in 1..=4 {
        let strided = stage < 3 || (stage == 3 && cfg.output_stride == 8);
        let (first, second) = if strided {
            (ConvGeom::strided(3, 2), ConvGeom::same(3, 1))
        } else if stage == 3 {
            (ConvGeom::same(3, 2), ConvGeom::same(3, 2))
        } else {
            let d = 16 / cfg.output_stride;
            (ConvGeom::same(3, d), ConvGeom::same(3, d))
        };
        x = conv_relu(g, p, &format!("encoder.stage{stage}.conv0"), x, first)?;
        x = conv_relu(g, p, &format!("encoder.stage{stage}.conv1"), x, second)?;
        if stage >= 3 {
            taps.push(x);
        }
    }
    if cfg.multi_level {
        g.concat(&taps, 1)
    } else {
        Ok(x)
    }
}
