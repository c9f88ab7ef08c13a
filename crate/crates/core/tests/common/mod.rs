#![allow(dead_code)]

use crnet::config::ModelConfig;
use crnet::data::{ClassId, ImageSample, LabelMap};
use rand::Rng;

/// Small model for fast property tests: 8 feature channels.
pub fn tiny_model() -> ModelConfig {
    crnet::train::gradcheck::tiny_config(8)
}

/// Random image with a random axis-aligned rectangle of `class`.
pub fn random_sample<R: Rng>(rng: &mut R, size: usize, class: ClassId) -> ImageSample {
    let pixels: Vec<f32> = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    let x0 = rng.random_range(0..size / 2);
    let y0 = rng.random_range(0..size / 2);
    let x1 = rng.random_range(x0 + size / 4..=size);
    let y1 = rng.random_range(y0 + size / 4..=size);
    let mut labels = vec![0u16; size * size];
    for y in y0..y1 {
        for x in x0..x1 {
            labels[y * size + x] = class.0;
        }
    }
    ImageSample::new(pixels, LabelMap::new(size, size, labels).unwrap(), class).unwrap()
}

/// Random binary mask with foreground probability `p`.
pub fn random_mask<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}
