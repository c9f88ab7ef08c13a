use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer label of a semantic class. `0` is background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Label map with one class id per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: ClassId) -> Self {
        Self { height, width, labels: vec![class.0; height * width] }
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.labels.contains(&class.0)
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.labels.iter().filter(|&&l| l == class.0).count()
    }

    /// Distinct non-background classes in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut seen: Vec<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.into_iter().map(ClassId).collect()
    }

    /// `true` where the label equals `class`.
    pub fn binary(&self, class: ClassId) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class.0).collect()
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let labels = crate::autograd::kernels::nearest_resize(
            &self.labels,
            (self.height, self.width),
            (height, width),
        );
        Self { height, width, labels }
    }
}

/// Color image with its label map and the class the sample stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB in `[0, 1]`, row-major, `height * width * 3` values.
    pub pixels: Vec<f32>,
    pub mask: LabelMap,
    pub class_of_interest: ClassId,
}

impl ImageSample {
    pub fn new(pixels: Vec<f32>, mask: LabelMap, class_of_interest: ClassId) -> Result<Self> {
        let (height, width) = (mask.height, mask.width);
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidInput(format!(
                "pixels hold {} values but the {height}x{width} mask needs {}",
                pixels.len(),
                height * width * 3
            )));
        }
        Ok(Self { height, width, pixels, mask, class_of_interest })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.height != self.height || self.mask.width != self.width {
            return Err(Error::InvalidInput(format!(
                "mask {}x{} does not match image {}x{}",
                self.mask.height, self.mask.width, self.height, self.width
            )));
        }
        if self.pixels.len() != self.height * self.width * 3 {
            return Err(Error::InvalidInput("pixel buffer length does not match size".into()));
        }
        Ok(())
    }

    /// Same image relabelled to a different class of interest.
    pub fn with_class(&self, class: ClassId) -> Self {
        Self { class_of_interest: class, ..self.clone() }
    }

    /// Binary target: 1 where the mask equals the class of interest.
    pub fn target(&self) -> Vec<usize> {
        self.mask.labels.iter().map(|&l| usize::from(l == self.class_of_interest.0)).collect()
    }

    /// Normalised `[3, h, w]` tensor.
    pub fn to_chw<T: Scalar>(&self, mean: [f32; 3], std: [f32; 3]) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = vec![T::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = T::of(((self.pixels[p * 3 + c] - mean[c]) / std[c]) as f64);
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("consistent size")
    }

    /// Bilinear resize of the pixels with nearest-neighbour mask resizing.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let plane = self.height * self.width;
        let mut planar = vec![0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                planar[c * plane + p] = self.pixels[p * 3 + c];
            }
        }
        let mut out = vec![0f32; 3 * height * width];
        crate::autograd::kernels::bilinear_forward(
            &planar,
            3,
            (self.height, self.width),
            (height, width),
            &mut out,
        );
        let oplane = height * width;
        let mut pixels = vec![0f32; 3 * oplane];
        for p in 0..oplane {
            for c in 0..3 {
                pixels[p * 3 + c] = out[c * oplane + p].clamp(0.0, 1.0);
            }
        }
        Self {
            height,
            width,
            pixels,
            mask: self.mask.resize_nearest(height, width),
            class_of_interest: self.class_of_interest,
        }
    }
}
