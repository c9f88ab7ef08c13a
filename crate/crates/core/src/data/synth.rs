//! Procedural shapes dataset: one target shape per image, a few distractor
//! shapes of other classes, textured backgrounds. Seed-deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassId, DatasetIndex, ImageSample, IndexedImage, LabelMap};
use crate::config::{parse_bool, parse_list, parse_value, ConfigSection, KvConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    Ellipse,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Star,
        ShapeKind::Ellipse,
        ShapeKind::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Bar => "bar",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Membership test in the shape's unit frame.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => v >= -0.5 && 3f64.sqrt() * u.abs() + v <= 1.0,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Star => {
                let r = (u * u + v * v).sqrt();
                let phi = v.atan2(u);
                r <= 0.55 + 0.45 * (5.0 * phi).cos()
            }
            ShapeKind::Ellipse => u * u + 4.0 * v * v <= 1.0,
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.28,
        }
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub shapes: Vec<ShapeKind>,
    pub image_size: usize,
    pub instances_per_class: usize,
    pub max_distractors: usize,
    pub min_area: f64,
    pub max_area: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Amplitude of the low-frequency background texture.
    pub texture: f64,
    /// Per-instance RGB jitter around the class color.
    pub color_jitter: f64,
    /// Give every class a fixed base color; otherwise colors are random.
    pub class_colors: bool,
    /// Contrast of the per-class stripe pattern painted over each shape;
    /// 0 disables it. Stripe orientation is fixed per class.
    pub pattern: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shapes: ShapeKind::ALL.to_vec(),
            image_size: 64,
            instances_per_class: 40,
            max_distractors: 2,
            min_area: 0.05,
            max_area: 0.60,
            noise: 0.03,
            texture: 0.15,
            color_jitter: 0.08,
            class_colors: false,
            pattern: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.shapes.len() < 8 {
            return bad("at least 8 shape classes are required");
        }
        let mut names: Vec<_> = self.shapes.iter().map(|s| s.name()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.shapes.len() {
            return bad("shape classes must be distinct");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if self.instances_per_class == 0 {
            return bad("instances_per_class must be positive");
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area <= 1.0) {
            return bad("need 0 < min_area < max_area <= 1");
        }
        if self.noise < 0.0 || self.texture < 0.0 || self.color_jitter < 0.0 || !(0.0..=1.0).contains(&self.pattern) {
            return bad("noise, texture and color_jitter must be non-negative and pattern within [0, 1]");
        }
        Ok(())
    }
}

impl ConfigSection for SynthConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "shapes" => {
                let names: Vec<String> = parse_list(key, value)?;
                self.shapes = names
                    .iter()
                    .map(|n| ShapeKind::from_name(n).ok_or_else(|| Error::Config(format!("unknown shape {n:?}"))))
                    .collect::<Result<_>>()?;
            }
            "image_size" => self.image_size = parse_value(key, value)?,
            "instances_per_class" => self.instances_per_class = parse_value(key, value)?,
            "max_distractors" => self.max_distractors = parse_value(key, value)?,
            "min_area" => self.min_area = parse_value(key, value)?,
            "max_area" => self.max_area = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "texture" => self.texture = parse_value(key, value)?,
            "color_jitter" => self.color_jitter = parse_value(key, value)?,
            "class_colors" => self.class_colors = parse_bool(key, value)?,
            "pattern" => self.pattern = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        let names: Vec<&str> = self.shapes.iter().map(|s| s.name()).collect();
        kv.set("shapes", names.join(","));
        kv.set("image_size", self.image_size.to_string());
        kv.set("instances_per_class", self.instances_per_class.to_string());
        kv.set("max_distractors", self.max_distractors.to_string());
        kv.set("min_area", self.min_area.to_string());
        kv.set("max_area", self.max_area.to_string());
        kv.set("noise", self.noise.to_string());
        kv.set("texture", self.texture.to_string());
        kv.set("color_jitter", self.color_jitter.to_string());
        kv.set("class_colors", self.class_colors.to_string());
        kv.set("pattern", self.pattern.to_string());
        kv
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn raster(kind: ShapeKind, pl: &Placement, size: usize) -> Vec<bool> {
    let (sin, cos) = pl.angle.sin_cos();
    let mut out = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - pl.cx;
            let dy = y as f64 + 0.5 - pl.cy;
            let u = (cos * dx + sin * dy) / pl.radius;
            let v = (-sin * dx + cos * dy) / pl.radius;
            out[y * size + x] = kind.contains(u, v);
        }
    }
    out
}

fn place<R: Rng>(rng: &mut R, size: usize, rmin: f64, rmax: f64) -> Placement {
    let s = size as f64;
    Placement {
        cx: rng.random_range(0.2 * s..0.8 * s),
        cy: rng.random_range(0.2 * s..0.8 * s),
        radius: rng.random_range(rmin..rmax),
        angle: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

fn instance_color<R: Rng>(cfg: &SynthConfig, class_idx: usize, n_classes: usize, rng: &mut R) -> [f64; 3] {
    let base = if cfg.class_colors {
        hsv_to_rgb(class_idx as f64 / n_classes as f64, 0.75, 0.9)
    } else {
        hsv_to_rgb(rng.random::<f64>(), rng.random_range(0.5..0.9), rng.random_range(0.6..1.0))
    };
    let j = cfg.color_jitter;
    base.map(|c| if j > 0.0 { (c + rng.random_range(-j..j)).clamp(0.0, 1.0) } else { c })
}

fn background<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<[f64; 3]> {
    let size = cfg.image_size;
    let base = hsv_to_rgb(rng.random::<f64>(), rng.random_range(0.0..0.3), rng.random_range(0.3..0.7));
    let waves: Vec<(f64, f64, f64, usize)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0..3usize),
            )
        })
        .collect();
    let mut out = vec![base; size * size];
    for y in 0..size {
        for x in 0..size {
            let px = &mut out[y * size + x];
            for &(fx, fy, phase, ch) in &waves {
                px[ch] += cfg.texture * (fx * x as f64 + fy * y as f64 + phase).sin();
            }
        }
    }
    out
}

/// Brightness factor of the class stripe pattern at pixel (x, y).
fn stripe(contrast: f64, class_idx: usize, n_classes: usize, x: usize, y: usize) -> f64 {
    if contrast == 0.0 {
        return 1.0;
    }
    let angle = std::f64::consts::PI * class_idx as f64 / n_classes as f64;
    let t = x as f64 * angle.cos() + y as f64 * angle.sin();
    let on = (t * std::f64::consts::TAU / 4.0).sin() > 0.0;
    if on { 1.0 } else { 1.0 - contrast }
}

/// Generate `instances_per_class` images per shape class. Class ids follow
/// the order of `cfg.shapes`, starting at 1.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<DatasetIndex> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let n = cfg.shapes.len();
    let area = (size * size) as f64;
    // Radius range that roughly spans the area bounds for a unit-disk-like shape.
    let rmin = (cfg.min_area * area / std::f64::consts::PI).sqrt() * 0.9;
    let rmax = (cfg.max_area * area / 2.0).sqrt();
    let mut images = Vec::with_capacity(n * cfg.instances_per_class);
    for (ci, &kind) in cfg.shapes.iter().enumerate() {
        let class = ClassId(ci as u16 + 1);
        for inst in 0..cfg.instances_per_class {
            let mut pixels = background(cfg, &mut rng);
            let n_distract = rng.random_range(0..=cfg.max_distractors);
            let mut layers = Vec::with_capacity(n_distract + 1);
            for _ in 0..n_distract {
                let mut other = rng.random_range(0..n - 1);
                if other >= ci {
                    other += 1;
                }
                layers.push(other);
            }
            // The target takes a random depth among the distractors.
            let depth = rng.random_range(0..=n_distract);
            layers.insert(depth, ci);
            let colors: Vec<[f64; 3]> = layers.iter().map(|&c| instance_color(cfg, c, n, &mut rng)).collect();
            // Topmost layer per pixel, `usize::MAX` for background.
            let mut owner = None;
            for _ in 0..1000 {
                let mut top = vec![usize::MAX; size * size];
                for (li, &c) in layers.iter().enumerate() {
                    let cover = raster(cfg.shapes[c], &place(&mut rng, size, rmin, rmax), size);
                    for (p, &inside) in cover.iter().enumerate() {
                        if inside {
                            top[p] = li;
                        }
                    }
                }
                let frac = top.iter().filter(|&&l| l == depth).count() as f64 / area;
                if frac >= cfg.min_area && frac <= cfg.max_area {
                    owner = Some(top);
                    break;
                }
            }
            let owner = owner.ok_or_else(|| {
                Error::Config(format!("cannot place a {} within the area bounds", kind.name()))
            })?;
            let mut labels = vec![0u16; size * size];
            for (p, &li) in owner.iter().enumerate() {
                if li != usize::MAX {
                    let shade = stripe(cfg.pattern, layers[li], n, p % size, p / size);
                    pixels[p] = colors[li].map(|c| c * shade);
                    labels[p] = layers[li] as u16 + 1;
                }
            }
            let mut flat = Vec::with_capacity(size * size * 3);
            for px in &pixels {
                for &c in px {
                    let noisy = if cfg.noise > 0.0 { c + cfg.noise * rng.random_range(-1.0..1.0) } else { c };
                    // Quantise to 8 bits so the PNG layout round-trips exactly.
                    flat.push((noisy.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
                }
            }
            let mask = LabelMap::new(size, size, labels)?;
            let sample = ImageSample::new(flat, mask, class)?;
            images.push(IndexedImage { name: format!("{:02}_{}_{inst:04}", class.0, kind.name()), sample, source: None });
        }
    }
    let names = cfg.shapes.iter().map(|s| s.name().to_string()).collect();
    DatasetIndex::build(names, images)
}
