//! Deterministic synthetic detection scenes and the classification crops
//! derived from them.

mod dataset;
mod scene;

pub use dataset::{
    build_dataset_dir, derive_classification_crops, generate_split, sha256_hex, CropDataset,
    CropRecord, DatasetMeta, DetectionDataset, GenConfig, CROP_FILE_VERSION,
    DETECTION_FILE_VERSION, TRAIN_STREAM, VAL_STREAM,
};
pub use scene::{
    class_color, class_names, class_shape, generate_scene, object_mask, Scene, SceneRng, SceneSpec,
    Shape, MAX_CLASSES, PALETTE,
};
