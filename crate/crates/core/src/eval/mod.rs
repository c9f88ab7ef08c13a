//! Metrics, prediction and the cross-validation protocol.

mod metrics;
mod predict;
mod protocol;

pub use metrics::{fb_iou, iou, iou_accumulate, Counts, IouAccumulator};
pub use predict::{multiscale_predict, pair_probabilities, predict_probabilities, ProbMap, DEFAULT_SCALES};
pub use protocol::{
    cross_validate, cross_validate_with, dataset_folds, evaluate_episode, evaluate_fold, fold_checkpoint_path,
    validate_on_train_classes, ClassResult, CrossValReport, EvalConfig, EvalReport,
};
