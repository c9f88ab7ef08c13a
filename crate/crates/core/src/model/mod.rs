//! Forward computation of the cross-reference network for one image pair.
//!
//! Graph-level builders (`*_nodes`) operate on `[2, ...]` batches with the
//! support at index 0 and the query at index 1; every layer processes the
//! two items independently with one parameter copy, which is what makes the
//! pair operations swap-equivariant. The free functions below wrap them for
//! value-level use.

mod condition;
mod cross_reference;
mod encoder;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use condition::{
    condition_nodes, empty_foreground_warnings, foreground_pool_nodes, mask_background, pool_weights,
};
pub use cross_reference::{co_occurrence_nodes, cross_reference_nodes};
pub use encoder::{encode_nodes, FEATURE_STRIDE};

use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::data::{ClassId, ImageSample, LabelMap};
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[C, h, w]` activations at a fixed stride from the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Shape(format!("feature map must be [C,h,w], got {:?}", data.shape())));
        }
        Ok(Self { data, stride: FEATURE_STRIDE })
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    fn from_batch(t: &Tensor<T>, n: usize) -> Self {
        let s = t.shape();
        let data = Tensor::from_vec(&s[1..], t.item(n).to_vec()).expect("batch item");
        Self { data, stride: FEATURE_STRIDE }
    }
}

/// Per-channel importance shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGate<T> {
    pub values: Vec<T>,
}

/// Mean feature over the pixels of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryVector<T> {
    pub values: Vec<T>,
    pub source_class: ClassId,
}

/// Fresh parameters for every sub-module enabled in `cfg`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut rng);
    encoder::declare(cfg, &mut b)?;
    if cfg.use_cross_reference {
        cross_reference::declare(cfg, &mut b)?;
    }
    condition::declare(cfg, &mut b)?;
    crate::refine::declare(cfg, &mut b)?;
    Ok(b.finish())
}

fn pair_of<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<Tensor<T>> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Shape(format!(
            "feature maps differ: {:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    Tensor::stack(&[&a.data, &b.data])
}

/// Normalised `[n, 3, h, w]` batch of images that all share one size.
pub fn image_batch<T: Scalar>(images: &[&ImageSample], cfg: &ModelConfig) -> Result<Tensor<T>> {
    for im in images {
        im.validate()?;
    }
    let tensors: Vec<Tensor<T>> = images.iter().map(|im| im.to_chw(cfg.norm_mean, cfg.norm_std)).collect();
    Tensor::stack(&tensors.iter().collect::<Vec<_>>())
}

/// Encode support and query with the one shared encoder.
pub fn encode_pair<T: Scalar>(
    support: &ImageSample,
    query: &ImageSample,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let batch = image_batch(&[support, query], cfg)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let x = g.input(batch);
    let f = encode_nodes(&mut g, &p, cfg, x)?;
    let v = g.value(f);
    Ok((FeatureMap::from_batch(v, 0), FeatureMap::from_batch(v, 1)))
}

/// Gate both feature maps by their fused channel importance.
pub fn cross_reference<T: Scalar>(
    fs: &FeatureMap<T>,
    fq: &FeatureMap<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(FeatureMap<T>, FeatureMap<T>, ChannelGate<T>)> {
    if fs.channels() != cfg.feature_channels() {
        return Err(Error::Shape(format!(
            "expected {} channels, got {}",
            cfg.feature_channels(),
            fs.channels()
        )));
    }
    let pair = pair_of(fs, fq)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let x = g.input(pair);
    let (gated, gate) = cross_reference_nodes(&mut g, &p, cfg, x)?;
    let gv = g.value(gated);
    let gate = ChannelGate { values: g.value(gate).item(0).to_vec() };
    Ok((FeatureMap::from_batch(gv, 0), FeatureMap::from_batch(gv, 1), gate))
}

/// Two-channel (background, foreground) co-occurrence logits per branch.
pub fn co_occurrence_head<T: Scalar>(
    gs: &FeatureMap<T>,
    gq: &FeatureMap<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let pair = pair_of(gs, gq)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let x = g.input(pair);
    let out = co_occurrence_nodes(&mut g, &p, cfg, x)?;
    let v = g.value(out);
    Ok((FeatureMap::from_batch(v, 0).data, FeatureMap::from_batch(v, 1).data))
}

/// Average of `f` over the pixels where the downsampled mask equals `class`.
pub fn foreground_pool<T: Scalar>(
    f: &FeatureMap<T>,
    mask: &LabelMap,
    class: ClassId,
) -> Result<CategoryVector<T>> {
    if !mask.contains(class) {
        return Err(Error::InvalidInput(format!("class {class} does not appear in the mask")));
    }
    let weights = pool_weights::<T>(mask, class, f.height(), f.width());
    let mut g = Graph::new();
    let shape = f.data.shape();
    let x = g.input(f.data.clone().reshape(&[1, shape[0], shape[1], shape[2]])?);
    let out = foreground_pool_nodes(&mut g, x, weights)?;
    Ok(CategoryVector { values: g.value(out).data().to_vec(), source_class: class })
}

/// Fuse a category vector into one branch's features.
pub fn condition<T: Scalar>(
    gfeat: &FeatureMap<T>,
    cv: &CategoryVector<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<FeatureMap<T>> {
    let s = gfeat.data.shape();
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let x = g.input(gfeat.data.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let v = g.input(Tensor::from_vec(&[1, cv.values.len()], cv.values.clone())?);
    let out = condition_nodes(&mut g, &p, cfg, x, Some(v))?;
    Ok(FeatureMap::from_batch(g.value(out), 0))
}
