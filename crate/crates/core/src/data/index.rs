use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use super::{ClassId, ImageSample};
use crate::error::{Error, Result};

/// One image of a dataset with its multi-class label map.
#[derive(Clone, Debug)]
pub struct IndexedImage {
    pub name: String,
    pub sample: ImageSample,
    /// `(image, mask)` files the entry was loaded from, if any.
    pub source: Option<(PathBuf, PathBuf)>,
}

/// Entries compare by name, pixels and labels. The class of interest is
/// episode state, not dataset content.
impl PartialEq for IndexedImage {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.sample.pixels == other.sample.pixels
            && self.sample.mask == other.sample.mask
    }
}

/// Immutable dataset: images, class names and per-class image lists.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    /// Name of class id `i + 1` at position `i`.
    pub class_names: Vec<String>,
    pub images: Vec<IndexedImage>,
    pub by_class: BTreeMap<ClassId, Vec<usize>>,
    /// Mean RGB over every pixel of every image.
    pub mean_color: [f32; 3],
}

impl DatasetIndex {
    pub fn build(class_names: Vec<String>, images: Vec<IndexedImage>) -> Result<Self> {
        let n_classes = class_names.len();
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        let mut sum = [0f64; 3];
        let mut count = 0usize;
        for (i, im) in images.iter().enumerate() {
            im.sample.validate()?;
            for c in im.sample.mask.classes() {
                if c.0 as usize > n_classes {
                    return Err(Error::Dataset {
                        path: im.source.as_ref().map(|s| s.1.clone()).unwrap_or_else(|| im.name.clone().into()),
                        msg: format!("unknown label id {c} (class table has {n_classes} entries)"),
                    });
                }
                by_class.entry(c).or_default().push(i);
            }
            for px in im.sample.pixels.chunks_exact(3) {
                for (s, &v) in sum.iter_mut().zip(px) {
                    *s += v as f64;
                }
            }
            count += im.sample.height * im.sample.width;
        }
        let mean_color = if count == 0 {
            [0.5; 3]
        } else {
            sum.map(|s| (s / count as f64) as f32)
        };
        Ok(Self { class_names, images, by_class, mean_color })
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        (1..=self.class_names.len() as u16).map(ClassId).collect()
    }

    pub fn class_name(&self, c: ClassId) -> Option<&str> {
        self.class_names.get((c.0 as usize).checked_sub(1)?).map(String::as_str)
    }

    pub fn images_of(&self, c: ClassId) -> &[usize] {
        self.by_class.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sub-index of the images with no pixel of any `excluded` class.
    pub fn without_classes(&self, excluded: &BTreeSet<ClassId>) -> Result<Self> {
        let kept = self
            .images
            .iter()
            .filter(|im| !im.sample.mask.classes().iter().any(|c| excluded.contains(c)))
            .cloned()
            .collect();
        Self::build(self.class_names.clone(), kept)
    }

    /// Entry `i` relabelled to `class`.
    pub fn sample(&self, i: usize, class: ClassId) -> ImageSample {
        self.images[i].sample.with_class(class)
    }

    /// Per-channel pixel standard deviation around [`Self::mean_color`].
    pub fn std_color(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        let mut count = 0usize;
        for im in &self.images {
            for px in im.sample.pixels.chunks_exact(3) {
                for c in 0..3 {
                    let d = (px[c] - self.mean_color[c]) as f64;
                    acc[c] += d * d;
                }
            }
            count += im.sample.height * im.sample.width;
        }
        if count == 0 {
            return [0.25; 3];
        }
        acc.map(|a| ((a / count as f64).sqrt() as f32).max(1e-3))
    }
}
