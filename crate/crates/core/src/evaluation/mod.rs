//! Recognition, segmentation and entanglement metrics.

mod ranking;
mod report;
mod segmentation;
mod similarity;

pub use ranking::{average_precision, mean_average_precision, precision_at, MapResult};
pub use report::{evaluate_mlr, MetricsReport};
pub use segmentation::{
    miou, segment, segment_projected, segment_scores, upsample_bilinear, MiouResult,
    SegmentOptions, SegmentationMask, BACKGROUND, DEFAULT_BG_THRESHOLD, DEFAULT_SEGMENT_SCALE,
};
pub use similarity::{cosine_matrix, histogram_csv, mfi_statistic, similarity_csv};
