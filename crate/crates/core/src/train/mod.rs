//! Episodic optimisation: the pair forward pass, the three-head loss, SGD,
//! checkpoints and gradient verification.

mod checkpoint;
mod config;
mod engine;
mod forward;
pub mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{Checkpoint, MAGIC, SCHEMA_VERSION};
pub use config::TrainConfig;
pub use engine::{
    episode_seed, resize_episode, run_config, train, train_step, MetricRecord, TrainIo, TrainOutcome,
    CHECKPOINT_FILE, METRICS_FILE,
};
pub use forward::{
    forward_episode, forward_episode_with_extractor, pair_nodes, pair_nodes_from_features, support_input,
    EpisodeOutputs, FeatureExtractor, PairNodes,
};
pub use gradcheck::{grad_check, GradReport, ShapeSpec};
pub use loss::{breakdown, compute_loss, loss_nodes, pair_targets, LossBreakdown, LossNodes, LossWeights};
pub use optim::Sgd;
