//! Metrics and reports.

mod frechet;
mod metrics;
mod report;

pub use frechet::{covariance, frechet_distance, mean_vector, FRECHET_RIDGE};
pub use metrics::{iou, iou_triplet, l1_error, l1_in_region, IouTriplet};
pub use report::{
    aggregate, evaluate, evaluate_recovery, grid_row, run_cascade, write_grids, Aggregate, CascadeOutput, EvalOptions, MetricReport,
    RecoveryScores,    SampleMetrics, FRECHET_NOTE, MASK_THRESHOLD,
};
