use rand::Rng;

use super::{ClassId, DatasetIndex, FoldSplit, ImageSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// One few-shot task: `k` labelled supports and a query, all containing
/// `target_class`. Every sample's class of interest is the target class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<ImageSample>,
    pub query: ImageSample,
    pub target_class: ClassId,
    pub k: usize,
    /// Dataset positions of the supports, then the query.
    pub image_ids: Vec<usize>,
}

impl Episode {
    /// Build an episode from explicit samples (used by finetuning and tests).
    pub fn from_samples(support: Vec<ImageSample>, query: ImageSample, target_class: ClassId) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidInput("episode needs at least one support".into()));
        }
        for s in support.iter().chain(std::iter::once(&query)) {
            s.validate()?;
        }
        let k = support.len();
        let support = support.into_iter().map(|s| s.with_class(target_class)).collect();
        Ok(Self { support, query: query.with_class(target_class), target_class, k, image_ids: Vec::new() })
    }
}

/// Draw a class uniformly from the split's pool for `mode`, then `k + 1`
/// distinct images of that class without replacement: the query first, then
/// the supports in order. The draw is a prefix of a Fisher-Yates shuffle, so
/// for a fixed rng state a larger `k` only appends supports.
pub fn sample_episode<R: Rng + ?Sized>(
    index: &DatasetIndex,
    split: &FoldSplit,
    mode: Mode,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let mut candidates: Vec<ClassId> = split.pool(mode).iter().copied().collect();
    if candidates.is_empty() {
        return Err(Error::InvalidInput(format!("fold {} has no {mode:?} classes", split.fold_id)));
    }
    while !candidates.is_empty() {
        let pick = rng.random_range(0..candidates.len());
        let class = candidates[pick];
        let pool = index.images_of(class);
        if pool.len() < k + 1 {
            candidates.swap_remove(pick);
            continue;
        }
        let mut order: Vec<usize> = pool.to_vec();
        for i in 0..=k {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        let support = order[1..=k].iter().map(|&i| index.sample(i, class)).collect();
        let query = index.sample(order[0], class);
        let mut image_ids = order[1..=k].to_vec();
        image_ids.push(order[0]);
        return Ok(Episode { support, query, target_class: class, k, image_ids });
    }
    Err(Error::InvalidInput(format!(
        "no {mode:?} class of fold {} has at least {} images",
        split.fold_id,
        k + 1
    )))
}
