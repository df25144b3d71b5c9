//! Detection evaluation: suppression, COCO-style AP/AR and error breakdown.

mod errors;
mod metrics;
mod nms;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;

pub use errors::{
    classify_image, error_decomposition, ErrorKind, ErrorReport, ImageVerdicts, PerKind, Verdict,
    BACKGROUND_IOU,
};
pub use metrics::{
    average_precision, coco_metrics, coco_thresholds, mean_ap_at, CocoMetrics, EvalConfig,
};
pub use nms::{nms, sort_by_score};

/// One scored box produced by a detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub label: usize,
    pub score: f64,
}
