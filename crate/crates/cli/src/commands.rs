use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::de::DeserializeOwned;
use serde::Serialize;

use cls2det::checkpoint::{Checkpoint, ModelKind};
use cls2det::eval::{
    coco_metrics, error_decomposition, CocoMetrics, ErrorKind, ErrorReport, EvalConfig,
};
use cls2det::gradsuite::{run_suite, THRESHOLD};
use cls2det::kd_loc::LocLayer;
use cls2det::models::PostProcess;
use cls2det::synthdata::{
    build_dataset_dir, CropDataset, DatasetMeta, DetectionDataset, GenConfig, SceneSpec,
};
use cls2det::train::{
    detect_all, evaluate_teacher, train_student as run_student, train_teacher as run_teacher,
    StudentRunConfig, TeacherRunConfig,
};
use cls2det::Error;

use super::{EvalArgs, GenDataArgs, GradcheckArgs, StudentArgs, TeacherArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEACHER_FILE: &str = "teacher.kdck";
pub const STUDENT_FILE: &str = "student.kdck";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Check(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Check(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) | Error::Format(_) | Error::Json(_) => CliError::Io(msg),
            Error::Config(_) | Error::Kind(_) | Error::Domain(_) | Error::DegenerateBox(_) => {
                CliError::Usage(msg)
            }
            Error::Numerical(_) | Error::Shape(_) => CliError::Check(msg),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn with_path<T>(path: &Path, r: cls2det::Result<T>) -> CliResult<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Io(m) => io_err(path, m),
        other => other,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Strict parse of a run config; unknown keys are usage errors.
fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn dataset_meta(dir: &Path) -> CliResult<DatasetMeta> {
    with_path(&dir.join(DatasetMeta::FILE), DatasetMeta::load(dir))
}

/// One JSON object per line, flushed after each record.
struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    fn create(path: PathBuf) -> CliResult<Self> {
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn record(&mut self, value: &impl Serialize) -> CliResult<()> {
        let line = serde_json::to_string(value).map_err(|e| io_err(&self.path, e))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| io_err(&self.path, e))
    }
}

pub fn gen_data(a: GenDataArgs) -> CliResult<ExitCode> {
    let cfg = GenConfig {
        seed: a.seed,
        num_train: a.num_train,
        num_val: a.num_val,
        crop_size: a.crop_size,
        scene: SceneSpec {
            image_size: a.image_size,
            classes: a.classes,
            ..SceneSpec::default()
        },
    };
    cfg.scene.validate()?;
    let meta = with_path(&a.out, build_dataset_dir(&a.out, &cfg))?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    println!(
        "{} classes, {}px images: {} train ({} objects), {} val ({} objects), {}px crops",
        meta.classes,
        meta.image_size,
        meta.num_train,
        meta.train_objects,
        meta.num_val,
        meta.val_objects,
        meta.crop_size
    );
    println!("dataset hash {}", meta.hash());
    Ok(ExitCode::SUCCESS)
}

pub fn train_teacher(a: TeacherArgs) -> CliResult<ExitCode> {
    let mut cfg: TeacherRunConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TeacherRunConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = &a.loss {
        cfg.loss = v.parse()?;
    }
    if a.no_flip {
        cfg.flip = false;
    }
    let meta = dataset_meta(&a.data)?;
    let train_path = a.data.join(DatasetMeta::TRAIN_CROPS);
    let val_path = a.data.join(DatasetMeta::VAL_CROPS);
    let train = with_path(&train_path, CropDataset::read(&train_path))?;
    let val = with_path(&val_path, CropDataset::read(&val_path))?;
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    let mut metrics = MetricsWriter::create(a.out.join(METRICS_FILE))?;
    let mut write_err = None;
    let run = run_teacher(&train, &val, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}",
            e.epoch, e.loss, e.train_acc, e.val_acc
        );
        if let Err(err) = metrics.record(e) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let config = serde_json::to_value(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
    let ck = Checkpoint::from_teacher(&run.teacher, config, Some(meta.hash()))?;
    let path = a.out.join(TEACHER_FILE);
    with_path(&path, ck.save(&path))?;
    println!(
        "best val top-1 {:.4} at epoch {}",
        run.best_val_acc, run.best_epoch
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_pool(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--pool-size expects N or HxW, got {s:?}"));
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn student_config(a: &StudentArgs) -> CliResult<StudentRunConfig> {
    let mut cfg: StudentRunConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => StudentRunConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = &a.head {
        cfg.head = v.parse()?;
    }
    if a.no_flip {
        cfg.flip = false;
    }
    cfg.terms.kd_cls |= a.kd_cls;
    cfg.terms.kd_loc |= a.kd_loc;
    cfg.terms.kd_loc0 |= a.kd_loc0;
    let d = &mut cfg.distill;
    if let Some(v) = a.lambda_kc {
        d.lambda_kc = v;
    }
    if let Some(v) = a.lambda_kl {
        d.lambda_kl = v;
    }
    if let Some(v) = a.temperature {
        d.temperature = v;
    }
    if let Some(v) = a.sampling_size {
        d.sampling_size = v;
    }
    if let Some(v) = &a.pool_size {
        (d.pool_h, d.pool_w) = parse_pool(v)?;
    }
    if let Some(v) = &a.layers {
        d.layers = LocLayer::parse_list(v)?;
    }
    if let Some(t) = &a.teacher {
        cfg.teacher = Some(t.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_student(a: StudentArgs) -> CliResult<ExitCode> {
    let cfg = student_config(&a)?;
    let needs_teacher = cfg.terms.needs_teacher(&cfg.distill);
    if needs_teacher && cfg.teacher.is_none() {
        return Err(CliError::Usage(
            "--kd-cls and --kd-loc with teacher layers (l1, l2) need --teacher; --kd-loc0 alone runs without one".into(),
        ));
    }
    let meta = dataset_meta(&a.data)?;
    let teacher = match (&cfg.teacher, needs_teacher) {
        (Some(p), true) => {
            let path = PathBuf::from(p);
            let ck = with_path(&path, Checkpoint::load(&path))?;
            warn_on_hash_mismatch(&ck, &meta);
            Some(with_path(&path, ck.to_teacher())?)
        }
        _ => None,
    };
    let train_path = a.data.join(DatasetMeta::TRAIN);
    let val_path = a.data.join(DatasetMeta::VAL);
    let train = with_path(&train_path, DetectionDataset::read(&train_path))?;
    let val = with_path(&val_path, DetectionDataset::read(&val_path))?;
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    let mut metrics = MetricsWriter::create(a.out.join(METRICS_FILE))?;
    let mut write_err = None;
    let run = run_student(&train, &val, teacher.as_ref(), &cfg, |e| {
        eprintln!(
            "epoch {:>3}  det {:.4}  kd_cls {:.4}  kd_loc {:.4}  val mAP {:.4}  AP50 {:.4}  AP75 {:.4}",
            e.epoch, e.loss_det, e.loss_kd_cls, e.loss_kd_loc, e.val_map, e.val_ap50, e.val_ap75
        );
        if let Err(err) = metrics.record(e) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let config = serde_json::to_value(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
    let ck = Checkpoint::from_student(&run.student, config, Some(meta.hash()))?;
    let path = a.out.join(STUDENT_FILE);
    with_path(&path, ck.save(&path))?;
    let last = run.history.last().expect("at least one epoch");
    println!(
        "{}",
        serde_json::to_string(last).map_err(|e| CliError::Io(e.to_string()))?
    );
    Ok(ExitCode::SUCCESS)
}

fn warn_on_hash_mismatch(ck: &Checkpoint, meta: &DatasetMeta) {
    match &ck.meta.dataset_hash {
        Some(h) if *h != meta.hash() => {
            eprintln!(
                "warning: checkpoint was trained on dataset {h}, evaluating on {}",
                meta.hash()
            )
        }
        None => eprintln!("warning: checkpoint carries no dataset hash"),
        _ => {}
    }
}

fn split_files(split: &str) -> CliResult<(&'static str, &'static str)> {
    match split {
        "train" => Ok((DatasetMeta::TRAIN, DatasetMeta::TRAIN_CROPS)),
        "val" => Ok((DatasetMeta::VAL, DatasetMeta::VAL_CROPS)),
        other => Err(CliError::Usage(format!(
            "--split must be train or val, got {other:?}"
        ))),
    }
}

/// Loaded checkpoint plus the split it is evaluated on.
struct EvalInputs {
    ck: Checkpoint,
    data_dir: PathBuf,
    det_file: &'static str,
    crop_file: &'static str,
}

fn eval_inputs(a: &EvalArgs) -> CliResult<EvalInputs> {
    let (det_file, crop_file) = split_files(&a.split)?;
    let ck = with_path(&a.model, Checkpoint::load(&a.model))?;
    let meta = dataset_meta(&a.data)?;
    warn_on_hash_mismatch(&ck, &meta);
    Ok(EvalInputs {
        ck,
        data_dir: a.data.clone(),
        det_file,
        crop_file,
    })
}

/// Student detections and ground truth on the chosen split.
fn student_detections(
    inputs: &EvalInputs,
) -> CliResult<(Vec<Vec<cls2det::eval::Detection>>, DetectionDataset)> {
    let student = inputs.ck.to_student()?;
    let path = inputs.data_dir.join(inputs.det_file);
    let data = with_path(&path, DetectionDataset::read(&path))?;
    let dets = detect_all(&student, &data, &PostProcess::default())?;
    Ok((dets, data))
}

#[derive(Serialize)]
struct PartitionCheck {
    detections: usize,
    true_positives: usize,
    false_positives: usize,
    holds: bool,
}

impl PartitionCheck {
    fn of(r: &ErrorReport) -> Self {
        Self {
            detections: r.detections,
            true_positives: r.true_positives,
            false_positives: r.false_positives(),
            holds: r.true_positives + r.false_positives() == r.detections,
        }
    }
}

#[derive(Serialize)]
struct DetectorReport {
    model: String,
    data: String,
    split: String,
    metrics: CocoMetrics,
    errors: ErrorReport,
    partition: PartitionCheck,
}

#[derive(Serialize)]
struct ClassifierReport {
    model: String,
    data: String,
    split: String,
    top1: f64,
}

pub fn eval(a: EvalArgs) -> CliResult<ExitCode> {
    let inputs = eval_inputs(&a)?;
    if inputs.ck.meta.kind == ModelKind::Teacher {
        let teacher = inputs.ck.to_teacher()?;
        let path = a.data.join(inputs.crop_file);
        let crops = with_path(&path, CropDataset::read(&path))?;
        let top1 = evaluate_teacher(&teacher, &crops)?;
        write_json(
            &a.out,
            &ClassifierReport {
                model: a.model.display().to_string(),
                data: a.data.display().to_string(),
                split: a.split.clone(),
                top1,
            },
        )?;
        println!("top-1 {top1:.4}");
        return Ok(ExitCode::SUCCESS);
    }
    let (dets, data) = student_detections(&inputs)?;
    let gts = data.annotations();
    let cfg = EvalConfig::default();
    let metrics = coco_metrics(&dets, &gts, data.classes, &cfg);
    let errors = error_decomposition(&dets, &gts, data.classes, 0.5, &cfg);
    let partition = PartitionCheck::of(&errors);
    let holds = partition.holds;
    println!(
        "mAP {:.4}  AP50 {:.4}  AP75 {:.4}  mAR {:.4}",
        metrics.map, metrics.ap50, metrics.ap75, metrics.mar
    );
    write_json(
        &a.out,
        &DetectorReport {
            model: a.model.display().to_string(),
            data: a.data.display().to_string(),
            split: a.split.clone(),
            metrics,
            errors,
            partition,
        },
    )?;
    if !holds {
        return Err(CliError::Check(
            "error types do not partition the false positives".into(),
        ));
    }
    Ok(ExitCode::SUCCESS)
}

/// IoU thresholds of the error sweep: 0.50, 0.55, ..., 0.90.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..9).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Serialize)]
struct ErrorSweep {
    model: String,
    data: String,
    split: String,
    reports: Vec<ErrorReport>,
    partition_holds: bool,
}

pub fn error_analysis(a: EvalArgs) -> CliResult<ExitCode> {
    let inputs = eval_inputs(&a)?;
    let (dets, data) = student_detections(&inputs)?;
    let gts = data.annotations();
    let cfg = EvalConfig::default();
    let reports: Vec<ErrorReport> = sweep_thresholds()
        .into_iter()
        .map(|t| error_decomposition(&dets, &gts, data.classes, t, &cfg))
        .collect();
    let partition_holds = reports.iter().all(|r| PartitionCheck::of(r).holds);

    let mut csv = String::from("iou_threshold,kind,count,delta_ap,ap,true_positives,detections\n");
    for r in &reports {
        for k in ErrorKind::ALL {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iou_threshold,
                k.as_str(),
                r.counts.get(k),
                r.delta_ap.get(k),
                r.ap,
                r.true_positives,
                r.detections
            ));
        }
    }
    let csv_path = a.out.with_extension("csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;

    for r in &reports {
        let counts: Vec<String> = ErrorKind::ALL
            .iter()
            .map(|&k| format!("{} {}", k.as_str(), r.counts.get(k)))
            .collect();
        println!(
            "IoU {:.2}: AP {:.4}, TP {}, {}",
            r.iou_threshold,
            r.ap,
            r.true_positives,
            counts.join(", ")
        );
    }
    write_json(
        &a.out,
        &ErrorSweep {
            model: a.model.display().to_string(),
            data: a.data.display().to_string(),
            split: a.split.clone(),
            reports,
            partition_holds,
        },
    )?;
    if !partition_holds {
        return Err(CliError::Check(
            "error types do not partition the false positives".into(),
        ));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<ExitCode> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let results = run_suite(a.seed, a.seeds, a.op.as_deref(), a.corrupt_backward)?;
    if results.is_empty() {
        return Err(CliError::Usage(format!(
            "no op matches {:?}",
            a.op.unwrap_or_default()
        )));
    }
    println!("{:<26} {:>6} {:>14}  result", "op", "seeds", "max rel err");
    for r in &results {
        println!(
            "{:<26} {:>6} {:>14.3e}  {}",
            r.name,
            r.seeds,
            r.max_relative_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.json {
        write_json(p, &results)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        println!("{failed} of {} ops exceed {THRESHOLD:e}", results.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_sizes() {
        assert_eq!(parse_pool("4").unwrap(), (4, 4));
        assert_eq!(parse_pool("2x3").unwrap(), (2, 3));
        assert!(parse_pool("two").is_err());
    }

    #[test]
    fn sweep_has_nine_clean_thresholds() {
        let t = sweep_thresholds();
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[4], 0.7);
        assert_eq!(t[8], 0.9);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).code(), 2);
        assert_eq!(CliError::from(Error::Format("x".into())).code(), 3);
        assert_eq!(CliError::from(Error::Numerical("x".into())).code(), 1);
    }
}
