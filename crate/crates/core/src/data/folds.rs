use std::collections::BTreeSet;

use super::ClassId;
use crate::error::{Error, Result};

/// The twenty PASCAL VOC 2012 object classes in their conventional order.
pub const PASCAL_VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "potted plant",
    "sheep",
    "sofa",
    "train",
    "tv/monitor",
];

/// One cross-validation split: test on one block of classes, train on the rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_classes: BTreeSet<ClassId>,
    pub test_classes: BTreeSet<ClassId>,
}

impl FoldSplit {
    pub fn pool(&self, mode: super::Mode) -> &BTreeSet<ClassId> {
        match mode {
            super::Mode::Train => &self.train_classes,
            super::Mode::Test => &self.test_classes,
        }
    }
}

/// Fold `i` tests on the `i`-th contiguous block of `classes`.
pub fn make_folds(classes: &[ClassId], n_folds: usize) -> Result<Vec<FoldSplit>> {
    if n_folds == 0 || classes.is_empty() || classes.len() % n_folds != 0 {
        return Err(Error::InvalidInput(format!(
            "{} classes cannot be split evenly into {n_folds} folds",
            classes.len()
        )));
    }
    let unique: BTreeSet<ClassId> = classes.iter().copied().collect();
    if unique.len() != classes.len() {
        return Err(Error::InvalidInput("class list contains duplicates".into()));
    }
    let block = classes.len() / n_folds;
    Ok((0..n_folds)
        .map(|fold_id| {
            let test: BTreeSet<ClassId> = classes[fold_id * block..(fold_id + 1) * block].iter().copied().collect();
            let train = unique.difference(&test).copied().collect();
            FoldSplit { fold_id, train_classes: train, test_classes: test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u16) -> Vec<ClassId> {
        (1..=n).map(ClassId).collect()
    }

    #[test]
    fn non_divisible_is_an_error() {
        assert!(make_folds(&ids(10), 4).is_err());
        assert!(make_folds(&ids(8), 0).is_err());
    }

    #[test]
    fn folds_partition_the_classes() {
        let folds = make_folds(&ids(8), 4).unwrap();
        let mut all = BTreeSet::new();
        for f in &folds {
            assert_eq!(f.test_classes.len(), 2);
            assert!(f.train_classes.is_disjoint(&f.test_classes));
            assert_eq!(f.train_classes.len() + f.test_classes.len(), 8);
            assert!(all.is_disjoint(&f.test_classes));
            all.extend(f.test_classes.iter().copied());
        }
        assert_eq!(all.len(), 8);
    }
}
