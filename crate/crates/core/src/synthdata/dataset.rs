//! Detection and crop datasets, their binary files and the dataset directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{class_names, generate_scene, Scene, SceneRng, SceneSpec};
use crate::bbox::{Annotation, BoundingBox};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::kd_loc::crop_resize;

pub const DETECTION_FILE_VERSION: u32 = 1;
pub const CROP_FILE_VERSION: u32 = 1;
/// Scene `i` of the training split uses stream `TRAIN_STREAM + i`.
pub const TRAIN_STREAM: u64 = 0;
pub const VAL_STREAM: u64 = 1 << 32;

const DETECTION_MAGIC: &[u8; 4] = b"KDDS";
const CROP_MAGIC: &[u8; 4] = b"KDCL";

/// Scenes of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionDataset {
    pub classes: usize,
    pub image_size: usize,
    pub scenes: Vec<Scene>,
}

/// Renders `n` scenes from streams `stream_base..stream_base + n`.
pub fn generate_split(
    seed: u64,
    stream_base: u64,
    n: usize,
    spec: &SceneSpec,
) -> Result<DetectionDataset> {
    spec.validate()?;
    let scenes = (0..n as u64)
        .map(|i| generate_scene(&mut SceneRng::new(seed, stream_base + i), spec))
        .collect();
    Ok(DetectionDataset {
        classes: spec.classes,
        image_size: spec.image_size,
        scenes,
    })
}

fn flip_chw(pixels: &[f32], size: usize, out: &mut Vec<f64>) {
    for row in pixels.chunks(size) {
        out.extend(row.iter().rev().map(|&v| v as f64));
    }
}

impl DetectionDataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.scenes.iter().map(|s| s.annotation.len()).sum()
    }

    /// `[B, 3, S, S]` images; `flips[b]` mirrors image `b` horizontally.
    pub fn batch_images(&self, indices: &[usize], flips: &[bool]) -> Tensor {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for (k, &i) in indices.iter().enumerate() {
            let px = &self.scenes[i].pixels;
            if flips.get(k).copied().unwrap_or(false) {
                flip_chw(px, s, &mut data);
            } else {
                data.extend(px.iter().map(|&v| v as f64));
            }
        }
        Tensor::new(&[indices.len(), 3, s, s], data).expect("scene buffers have the declared size")
    }

    /// Annotation of scene `i`, mirrored when `flip` is set.
    pub fn annotation(&self, i: usize, flip: bool) -> Annotation {
        let a = &self.scenes[i].annotation;
        if !flip {
            return a.clone();
        }
        Annotation {
            boxes: a
                .boxes
                .iter()
                .map(|b| b.hflip(self.image_size as f64))
                .collect(),
            labels: a.labels.clone(),
        }
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.scenes.iter().map(|s| s.annotation.clone()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.image_size;
        let mut out = Vec::with_capacity(16 + self.len() * (3 * s * s * 4 + 4));
        out.extend_from_slice(DETECTION_MAGIC);
        for v in [
            DETECTION_FILE_VERSION,
            self.classes as u32,
            s as u32,
            self.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for scene in &self.scenes {
            for v in &scene.pixels {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(scene.annotation.len() as u32).to_le_bytes());
            for (b, l) in scene.annotation.iter() {
                for c in b.to_array() {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DETECTION_MAGIC)?;
        let version = r.u32()?;
        if version != DETECTION_FILE_VERSION {
            return Err(Error::Format(format!(
                "unsupported detection file version {version}"
            )));
        }
        let classes = r.u32()? as usize;
        let image_size = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut scenes = Vec::with_capacity(count);
        for index in 0..count {
            let record = |e: Error| Error::Format(format!("record {index}: {e}"));
            let pixels = r.f32s(3 * image_size * image_size).map_err(record)?;
            let n = r.u32().map_err(record)? as usize;
            let mut annotation = Annotation::default();
            for _ in 0..n {
                let c = r.f32s(4).map_err(record)?;
                let label = r.u32().map_err(record)? as usize;
                let b = BoundingBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64);
                let side = image_size as f64;
                let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= side && b.y2 <= side;
                if label >= classes || !(b.x1 < b.x2 && b.y1 < b.y2) || !inside {
                    return Err(Error::Format(format!(
                        "record {index}: invalid object {b:?} label {label}"
                    )));
                }
                annotation.boxes.push(b);
                annotation.labels.push(label);
            }
            scenes.push(Scene { pixels, annotation });
        }
        r.finish()?;
        Ok(Self {
            classes,
            image_size,
            scenes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropRecord {
    /// `[3, s, s]` row-major.
    pub pixels: Vec<f32>,
    pub label: usize,
}

/// One resized crop per annotated object.
#[derive(Clone, Debug, PartialEq)]
pub struct CropDataset {
    pub classes: usize,
    pub crop_size: usize,
    pub records: Vec<CropRecord>,
}

/// Cuts every annotated object out of its scene and resizes it to
/// `crop_size × crop_size` with bilinear sampling.
pub fn derive_classification_crops(
    det: &DetectionDataset,
    crop_size: usize,
) -> Result<CropDataset> {
    let s = det.image_size;
    let mut records = Vec::with_capacity(det.annotation_count());
    for (index, scene) in det.scenes.iter().enumerate() {
        let image: Vec<f64> = scene.pixels.iter().map(|&v| v as f64).collect();
        for (b, label) in scene.annotation.iter() {
            let crop = crop_resize(&image, 3, s, s, b, crop_size)
                .map_err(|e| Error::Format(format!("record {index}: {e}")))?;
            records.push(CropRecord {
                pixels: crop.into_iter().map(|v| v as f32).collect(),
                label,
            });
        }
    }
    Ok(CropDataset {
        classes: det.classes,
        crop_size,
        records,
    })
}

impl CropDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `[B, 3, s, s]` crops and their labels.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> (Tensor, Vec<usize>) {
        let s = self.crop_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let r = &self.records[i];
            if flips.get(k).copied().unwrap_or(false) {
                flip_chw(&r.pixels, s, &mut data);
            } else {
                data.extend(r.pixels.iter().map(|&v| v as f64));
            }
            labels.push(r.label);
        }
        let t = Tensor::new(&[indices.len(), 3, s, s], data)
            .expect("crop buffers have the declared size");
        (t, labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.crop_size;
        let mut out = Vec::with_capacity(20 + self.len() * (3 * s * s * 4 + 4));
        out.extend_from_slice(CROP_MAGIC);
        for v in [
            CROP_FILE_VERSION,
            self.classes as u32,
            s as u32,
            self.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            for v in &r.pixels {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(r.label as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CROP_MAGIC)?;
        let version = r.u32()?;
        if version != CROP_FILE_VERSION {
            return Err(Error::Format(format!(
                "unsupported crop file version {version}"
            )));
        }
        let classes = r.u32()? as usize;
        let crop_size = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for index in 0..count {
            let record = |e: Error| Error::Format(format!("record {index}: {e}"));
            let pixels = r.f32s(3 * crop_size * crop_size).map_err(record)?;
            let label = r.u32().map_err(record)? as usize;
            if label >= classes {
                return Err(Error::Format(format!(
                    "record {index}: label {label} out of range"
                )));
            }
            records.push(CropRecord { pixels, label });
        }
        r.finish()?;
        Ok(Self {
            classes,
            crop_size,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        let out: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite value".into()));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Everything needed to regenerate a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    /// Side of the classification crops; the teacher's input size.
    pub crop_size: usize,
    pub scene: SceneSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_train: 2000,
            num_val: 200,
            crop_size: 32,
            scene: SceneSpec::default(),
        }
    }
}

/// Contents of `meta.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub crop_size: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub train_objects: usize,
    pub val_objects: usize,
    pub seed: u64,
    /// SHA-256 of every data file, by file name.
    pub files: BTreeMap<String, String>,
}

impl DatasetMeta {
    pub const FILE: &'static str = "meta.json";
    pub const TRAIN: &'static str = "train.kdds";
    pub const VAL: &'static str = "val.kdds";
    pub const TRAIN_CROPS: &'static str = "train.kdcl";
    pub const VAL_CROPS: &'static str = "val.kdcl";

    /// Digest identifying the dataset contents.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("meta serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(Self::FILE))?)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Generates both splits and their crops and writes them with `meta.json`.
pub fn build_dataset_dir(dir: &Path, cfg: &GenConfig) -> Result<DatasetMeta> {
    if cfg.num_train == 0 || cfg.num_val == 0 {
        return Err(Error::Config("both splits need at least one image".into()));
    }
    if cfg.crop_size < 4 {
        return Err(Error::Config(format!(
            "crop size {} is too small",
            cfg.crop_size
        )));
    }
    let train = generate_split(cfg.seed, TRAIN_STREAM, cfg.num_train, &cfg.scene)?;
    let val = generate_split(cfg.seed, VAL_STREAM, cfg.num_val, &cfg.scene)?;
    let train_crops = derive_classification_crops(&train, cfg.crop_size)?;
    let val_crops = derive_classification_crops(&val, cfg.crop_size)?;
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (name, bytes) in [
        (DatasetMeta::TRAIN, train.to_bytes()),
        (DatasetMeta::VAL, val.to_bytes()),
        (DatasetMeta::TRAIN_CROPS, train_crops.to_bytes()),
        (DatasetMeta::VAL_CROPS, val_crops.to_bytes()),
    ] {
        files.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(dir.join(name), bytes)?;
    }
    let meta = DatasetMeta {
        classes: cfg.scene.classes,
        class_names: class_names(cfg.scene.classes),
        image_size: cfg.scene.image_size,
        crop_size: cfg.crop_size,
        num_train: cfg.num_train,
        num_val: cfg.num_val,
        train_objects: train.annotation_count(),
        val_objects: val.annotation_count(),
        seed: cfg.seed,
        files,
    };
    fs::write(
        dir.join(DatasetMeta::FILE),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(meta)
}
