//! Lightweight projectors that disentangle frozen vision-language features.
//!
//! Image grids and class prompt features come from a frozen encoder. Two small
//! projectors map them into a space where classes are less correlated. They
//! are trained with an asymmetric multi-label loss plus a penalty on the
//! off-diagonal similarity of projected class features. Predictions pool
//! per-location logits with softmax weights, and the same projections give
//! zero-shot segmentation masks.
//!
//! All reductions accumulate in f64 in a fixed order, so results are
//! bit-reproducible for a given seed.

pub mod aggregation;
pub mod data_io;
pub mod diffmath;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod projectors;
pub mod rng;
pub mod trainer;

pub use aggregation::{
    aggregate, class_probability, local_logits, mlr_logits, predict, LogitMaps, MlrLogits,
};
pub use data_io::{
    generate_synthetic, read_shard, read_text_bank, write_shard, write_text_bank, DatasetManifest,
    SyntheticData, SyntheticSpec,
};
pub use diffmath::{DenseArray, NormMode};
pub use error::{Error, Result};
pub use evaluation::{
    average_precision, evaluate_mlr, mean_average_precision, mfi_statistic, miou, precision_at,
    segment, MetricsReport, SegmentOptions, SegmentationMask,
};
pub use losses::{
    asl_loss, combined_loss, mfi_loss, similarity_matrix, AslParams, GramAxis, LossConfig,
    SimilarityMatrix,
};
pub use projectors::{
    init_projectors, project_image, project_text, FeatureGrid, PoolingOrder, ProjectedTextBank,
    ProjectorParams, PromptTemplates, TextBank,
};
pub use rng::XorShift64Star;
pub use trainer::{cosine_lr, load_checkpoint, save_checkpoint, train, TrainConfig, TrainLog};
