//! Intersection-over-union accumulators.
//!
//! Per-class IoU pools intersection and union counts over every episode of
//! that class before dividing. FB-IoU pools foreground and background
//! counts over all episodes regardless of class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{Error, Result};

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub intersection: u64,
    pub union: u64,
}

impl Counts {
    pub fn of(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.intersection += u64::from(p && g);
            c.union += u64::from(p || g);
        }
        c
    }

    /// `intersection / union`; an empty union (nothing predicted, nothing
    /// present) counts as a perfect match.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    fn add(&mut self, o: Counts) {
        self.intersection += o.intersection;
        self.union += o.union;
    }
}

/// IoU of one binary prediction against its ground truth.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(Counts::of(pred, gt).iou())
}

fn check_shapes(pred: &[bool], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub per_class: BTreeMap<ClassId, Counts>,
    pub foreground: Counts,
    pub background: Counts,
    pub episodes: usize,
    /// Average per-episode IoUs instead of pooling counts.
    pub per_episode: bool,
    episode_iou_sums: BTreeMap<ClassId, (f64, usize)>,
}

impl IouAccumulator {
    pub fn new(per_episode: bool) -> Self {
        Self { per_episode, ..Self::default() }
    }

    /// Add one episode's binary prediction for `class`.
    pub fn add(&mut self, pred: &[bool], gt: &[bool], class: ClassId) -> Result<()> {
        check_shapes(pred, gt)?;
        let fg = Counts::of(pred, gt);
        let inv = |m: &[bool]| m.iter().map(|&v| !v).collect::<Vec<_>>();
        let bg = Counts::of(&inv(pred), &inv(gt));
        self.per_class.entry(class).or_default().add(fg);
        let e = self.episode_iou_sums.entry(class).or_default();
        e.0 += fg.iou();
        e.1 += 1;
        self.foreground.add(fg);
        self.background.add(bg);
        self.episodes += 1;
        Ok(())
    }

    /// Fold another accumulator in. Merging is associative and
    /// commutative on the counts; episode-averaged sums are merged in
    /// call order.
    pub fn merge(&mut self, other: &IouAccumulator) {
        for (c, counts) in &other.per_class {
            self.per_class.entry(*c).or_default().add(*counts);
        }
        for (c, (s, n)) in &other.episode_iou_sums {
            let e = self.episode_iou_sums.entry(*c).or_default();
            e.0 += s;
            e.1 += n;
        }
        self.foreground.add(other.foreground);
        self.background.add(other.background);
        self.episodes += other.episodes;
    }

    pub fn class_iou(&self, class: ClassId) -> Option<f64> {
        if self.per_episode {
            self.episode_iou_sums.get(&class).map(|&(s, n)| s / n as f64)
        } else {
            self.per_class.get(&class).map(|c| c.iou())
        }
    }

    pub fn class_ious(&self) -> BTreeMap<ClassId, f64> {
        self.per_class.keys().map(|&c| (c, self.class_iou(c).expect("present"))).collect()
    }

    /// Arithmetic mean of the per-class IoUs; 0 when nothing was added.
    pub fn mean_iou(&self) -> f64 {
        let ious = self.class_ious();
        if ious.is_empty() {
            0.0
        } else {
            ious.values().sum::<f64>() / ious.len() as f64
        }
    }

    /// Mean of the pooled foreground and background IoUs.
    pub fn fb_iou(&self) -> f64 {
        0.5 * (self.foreground.iou() + self.background.iou())
    }
}

/// Free-function form of [`IouAccumulator::add`].
pub fn iou_accumulate(pred: &[bool], gt: &[bool], class: ClassId, mut acc: IouAccumulator) -> Result<IouAccumulator> {
    acc.add(pred, gt, class)?;
    Ok(acc)
}

/// FB-IoU of an accumulator.
pub fn fb_iou(acc: &IouAccumulator) -> f64 {
    acc.fb_iou()
}
