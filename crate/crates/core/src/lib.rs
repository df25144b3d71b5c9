//! Classifier-to-detector knowledge distillation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffmath`]: tensors, a reverse-mode tape and gradient checking.
//! * [`kd_cls`]: temperature-softened classification distillation for
//!   categorical (softmax) and binary (sigmoid) detection heads.
//! * [`kd_loc`]: localization distillation through an affine spatial
//!   transformer and adaptive average pooling.
//! * [`models`]: toy teacher classifier, toy anchor-based student detector.
//! * [`synthdata`]: deterministic synthetic shape scenes and crop datasets.
//! * [`train`]: SGD, the combined objective and the training loops.
//! * [`eval`]: COCO-style AP/AR and detection error decomposition.
//! * [`checkpoint`], [`gradsuite`]: persistence and the gradient-check suite
//!   driven by the command-line tool.

pub mod bbox;
pub mod checkpoint;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod kd_cls;
pub mod kd_loc;
pub mod models;
pub mod synthdata;
pub mod train;

pub use bbox::{Annotation, BoundingBox};
pub use error::{Error, Result};
