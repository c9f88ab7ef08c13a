//! `images/*.png`, `masks/*.png` (index-valued) and `classes.txt`
//! (line `n`, counting from 1, names class id `n`; 0 is background).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use super::{ClassId, DatasetIndex, ImageSample, IndexedImage, LabelMap};
use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const CLASSES_FILE: &str = "classes.txt";

/// Label value conventionally used for "ignore" borders; read as background.
const VOID_LABEL: u16 = 255;

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write `index` under `root`. A non-empty `root` is refused unless `force`.
pub fn write_layout(index: &DatasetIndex, root: &Path, force: bool) -> Result<()> {
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::InvalidInput(format!(
                "{} is not empty (pass force to overwrite)",
                root.display()
            )));
        }
    }
    let (img_dir, mask_dir) = (root.join(IMAGES_DIR), root.join(MASKS_DIR));
    ensure_dir(&img_dir)?;
    ensure_dir(&mask_dir)?;
    let classes = root.join(CLASSES_FILE);
    let mut text = index.class_names.join("\n");
    text.push('\n');
    fs::write(&classes, text).map_err(|e| Error::io(&classes, e))?;
    let wide = index.class_names.len() > 254;
    for im in &index.images {
        let s = &im.sample;
        let rgb: Vec<u8> = s.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = RgbImage::from_raw(s.width as u32, s.height as u32, rgb).expect("buffer size");
        let ipath = img_dir.join(format!("{}.png", im.name));
        img.save(&ipath).map_err(|e| Error::Image { path: ipath.clone(), source: e })?;
        let mpath = mask_dir.join(format!("{}.png", im.name));
        let saved = if wide {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(s.width as u32, s.height as u32, s.mask.labels.clone()).expect("mask size");
            buf.save(&mpath)
        } else {
            let bytes: Vec<u8> = s.mask.labels.iter().map(|&l| l as u8).collect();
            GrayImage::from_raw(s.width as u32, s.height as u32, bytes).expect("mask size").save(&mpath)
        };
        saved.map_err(|e| Error::Image { path: mpath.clone(), source: e })?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_class_table(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}

fn read_mask(path: &Path, n_classes: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    // `to_luma16` rescales 8-bit values by 257.
    let scale = if matches!(img, image::DynamicImage::ImageLuma8(_)) { 257 } else { 1 };
    let mut labels = Vec::with_capacity((w * h) as usize);
    for &v in luma.as_raw() {
        let l = v / scale;
        if l == VOID_LABEL && n_classes < VOID_LABEL as usize {
            labels.push(0);
        } else if l as usize > n_classes {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                msg: format!("unknown label id {l} (class table has {n_classes} entries)"),
            });
        } else {
            labels.push(l);
        }
    }
    LabelMap::new(h as usize, w as usize, labels)
}

/// Load a dataset written by [`write_layout`] (or laid out the same way).
pub fn load_layout(root: &Path, size: Option<(usize, usize)>) -> Result<DatasetIndex> {
    load_pascal_style(&root.join(IMAGES_DIR), &root.join(MASKS_DIR), &root.join(CLASSES_FILE), size)
}

/// Scan an image directory and a parallel mask directory. Files pair up by
/// stem; images are resized to `size` (bilinear) and masks with nearest
/// neighbour. Each image is indexed under every class its mask contains.
pub fn load_pascal_style(
    image_dir: &Path,
    mask_dir: &Path,
    class_table: &Path,
    size: Option<(usize, usize)>,
) -> Result<DatasetIndex> {
    let names = read_class_table(class_table)?;
    let images = png_stems(image_dir)?;
    let masks = png_stems(mask_dir)?;
    for (stem, path) in &masks {
        if !images.iter().any(|(s, _)| s == stem) {
            return Err(Error::Dataset { path: path.clone(), msg: "mask has no matching image".into() });
        }
    }
    let mut entries = Vec::with_capacity(images.len());
    for (stem, ipath) in images {
        let Some((_, mpath)) = masks.iter().find(|(s, _)| *s == stem) else {
            return Err(Error::Dataset { path: ipath, msg: "image has no matching mask".into() });
        };
        let mask = read_mask(mpath, names.len())?;
        let rgb = image::open(&ipath).map_err(|e| Error::Image { path: ipath.clone(), source: e })?.to_rgb8();
        if (rgb.height() as usize, rgb.width() as usize) != (mask.height, mask.width) {
            return Err(Error::Dataset { path: ipath, msg: "image and mask sizes differ".into() });
        }
        let pixels: Vec<f32> = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        let class = mask.classes().first().copied().unwrap_or(ClassId::BACKGROUND);
        let mut sample = ImageSample::new(pixels, mask, class)?;
        if let Some((h, w)) = size {
            sample = sample.resized(h, w);
        }
        entries.push(IndexedImage { name: stem, sample, source: Some((ipath, mpath.clone())) });
    }
    if entries.is_empty() {
        log::warn!("no images found under {}", image_dir.display());
    }
    DatasetIndex::build(names, entries)
}
