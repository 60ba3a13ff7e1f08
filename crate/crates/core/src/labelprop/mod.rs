//! Label propagation over encoder features and J/F scoring.

pub mod evaluate;
pub mod metrics;
pub mod propagate;

pub use evaluate::{
    dataset_means, evaluate_dataset, evaluate_static_copy, extract_features, save_predictions, score_clip, scores_csv,
    segment_clip, static_copy, ClipResult, EvalConfig,
};
pub use metrics::{jf_metrics, SegmentationScore};
pub use propagate::{candidate_cells, propagate, top_k_neighbors, upsample_labels, FeatureGrid, LabelMap, PropagationConfig};
