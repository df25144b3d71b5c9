//! Toy classifier teacher, single-stage anchor-based student detector,
//! anchor handling, box coding and the detector training loss.

mod anchors;
mod codec;
mod loss;
mod params;
mod student;
mod teacher;

pub use anchors::{assign_anchors, generate_anchors, AnchorAssignment, AnchorLabel, AnchorSpec};
pub use codec::{decode, decode_boxes, encode, MAX_LOG_SCALE};
pub use loss::{batch_positives, detection_loss, DetectionLoss, DetectionLossConfig, PositiveRef};
pub use params::{he_normal, ParamStore};
pub use student::{PostProcess, Student, StudentArch, StudentOutput};
pub use teacher::{Teacher, TeacherArch, TeacherOutput};
