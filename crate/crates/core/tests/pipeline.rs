//! End-to-end: dataset directory, teacher, distilled student, checkpoints.

use cls2det::checkpoint::Checkpoint;
use cls2det::models::PostProcess;
use cls2det::synthdata::{
    build_dataset_dir, CropDataset, DatasetMeta, DetectionDataset, GenConfig,
};
use cls2det::train::{
    detect_all, evaluate_detector, evaluate_teacher, train_student, train_teacher, LossTerms,
    StudentRunConfig, TeacherRunConfig,
};

fn small_dir(dir: &std::path::Path) -> DatasetMeta {
    let cfg = GenConfig {
        seed: 5,
        num_train: 48,
        num_val: 12,
        ..GenConfig::default()
    };
    build_dataset_dir(dir, &cfg).unwrap()
}

fn student_cfg() -> StudentRunConfig {
    StudentRunConfig {
        epochs: 2,
        batch_size: 16,
        seed: 3,
        terms: LossTerms {
            kd_cls: true,
            kd_loc: true,
            kd_loc0: false,
        },
        ..StudentRunConfig::default()
    }
}

#[test]
fn dataset_teacher_student_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let meta = small_dir(tmp.path());
    assert_eq!(DatasetMeta::load(tmp.path()).unwrap(), meta);
    let train = DetectionDataset::read(&tmp.path().join(DatasetMeta::TRAIN)).unwrap();
    let val = DetectionDataset::read(&tmp.path().join(DatasetMeta::VAL)).unwrap();
    let crops = CropDataset::read(&tmp.path().join(DatasetMeta::TRAIN_CROPS)).unwrap();
    let val_crops = CropDataset::read(&tmp.path().join(DatasetMeta::VAL_CROPS)).unwrap();
    assert_eq!(crops.records.len(), meta.train_objects);

    let tcfg = TeacherRunConfig {
        epochs: 2,
        ..TeacherRunConfig::default()
    };
    let trun = train_teacher(&crops, &val_crops, &tcfg, |_| {}).unwrap();
    assert_eq!(trun.history.len(), 2);

    let tck = Checkpoint::from_teacher(
        &trun.teacher,
        serde_json::to_value(&tcfg).unwrap(),
        Some(meta.hash()),
    )
    .unwrap();
    let teacher = Checkpoint::from_bytes(&tck.to_bytes().unwrap())
        .unwrap()
        .to_teacher()
        .unwrap();
    let acc = evaluate_teacher(&teacher, &val_crops).unwrap();
    assert!(
        (acc - trun.best_val_acc).abs() < 0.05,
        "{acc} vs {}",
        trun.best_val_acc
    );

    let mut epochs = Vec::new();
    let run = train_student(&train, &val, Some(&teacher), &student_cfg(), |e| {
        epochs.push(e.clone())
    })
    .unwrap();
    assert_eq!(epochs.len(), 2);
    assert!(epochs
        .iter()
        .all(|e| e.loss_kd_cls > 0.0 && e.loss_kd_loc > 0.0));

    // Stored weights are f32: a loaded model reproduces itself exactly.
    let sck =
        Checkpoint::from_student(&run.student, serde_json::Value::Null, Some(meta.hash())).unwrap();
    let bytes = sck.to_bytes().unwrap();
    let a = Checkpoint::from_bytes(&bytes)
        .unwrap()
        .to_student()
        .unwrap();
    let b = Checkpoint::from_bytes(&bytes)
        .unwrap()
        .to_student()
        .unwrap();
    let pp = PostProcess::default();
    assert_eq!(
        detect_all(&a, &val, &pp).unwrap(),
        detect_all(&b, &val, &pp).unwrap()
    );
    let m = evaluate_detector(&a, &val).unwrap();
    assert!((0.0..=1.0).contains(&m.map));
}

#[test]
fn identical_configs_give_identical_students() {
    let tmp = tempfile::tempdir().unwrap();
    small_dir(tmp.path());
    let train = DetectionDataset::read(&tmp.path().join(DatasetMeta::TRAIN)).unwrap();
    let val = DetectionDataset::read(&tmp.path().join(DatasetMeta::VAL)).unwrap();
    let cfg = StudentRunConfig {
        terms: LossTerms {
            kd_loc0: true,
            ..LossTerms::default()
        },
        ..student_cfg()
    };
    let a = train_student(&train, &val, None, &cfg, |_| {}).unwrap();
    let b = train_student(&train, &val, None, &cfg, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.student.params, b.student.params);
}

#[test]
fn regenerating_a_directory_gives_the_same_hash() {
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(small_dir(x.path()).hash(), small_dir(y.path()).hash());
}
