//! Ranking metrics, the evaluation report, and late fusion.

mod fusion;
mod metrics;
mod report;

pub use fusion::{
    concat_features, event_ap, feature_fusion_score, feature_fusion_train, fuse_score_lists, read_scores, score_fusion,
    search_weights, uniform_weights, weight_grid, write_scores, HingeOptions, ImageScore, LinearClassifier,
};
pub use metrics::{average_precision, detection_map, Detection, GroundTruth, MapResult, RankedPrediction};
pub use report::{evaluate, event_features, event_scores, EvalConfig, Report};
