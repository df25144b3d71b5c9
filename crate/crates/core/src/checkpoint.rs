//! Model checkpoints.
//!
//! Layout, all integers u32 little-endian: magic `KDCK`, version, entry
//! count, then per entry the name length, UTF-8 name, rank, each dim and the
//! values as f32. Model metadata travels as one extra rank-1 entry named
//! [`META_ENTRY`] whose values are the bytes of a JSON document.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::models::{ParamStore, Student, StudentArch, Teacher, TeacherArch};

pub const MAGIC: &[u8; 4] = b"KDCK";
pub const VERSION: u32 = 1;
pub const META_ENTRY: &str = "__meta__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub arch: Value,
    /// Resolved training configuration.
    pub config: Value,
    /// Hash of the dataset meta file the model was trained on.
    pub dataset_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_teacher(t: &Teacher, config: Value, dataset_hash: Option<String>) -> Result<Self> {
        Ok(Self {
            meta: CheckpointMeta {
                kind: ModelKind::Teacher,
                arch: serde_json::to_value(&t.arch)?,
                config,
                dataset_hash,
            },
            params: t.params.clone(),
        })
    }

    pub fn from_student(s: &Student, config: Value, dataset_hash: Option<String>) -> Result<Self> {
        Ok(Self {
            meta: CheckpointMeta {
                kind: ModelKind::Student,
                arch: serde_json::to_value(&s.arch)?,
                config,
                dataset_hash,
            },
            params: s.params.clone(),
        })
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "checkpoint holds a {:?}, expected a {kind:?}",
                self.meta.kind
            )))
        }
    }

    pub fn to_teacher(&self) -> Result<Teacher> {
        self.expect_kind(ModelKind::Teacher)?;
        let arch: TeacherArch = serde_json::from_value(self.meta.arch.clone())?;
        let reference = Teacher::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        reference.params.check_layout(&self.params)?;
        Ok(Teacher {
            arch,
            params: self.params.clone(),
        })
    }

    pub fn to_student(&self) -> Result<Student> {
        self.expect_kind(ModelKind::Student)?;
        let arch: StudentArch = serde_json::from_value(self.meta.arch.clone())?;
        let reference = Student::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        reference.params.check_layout(&self.params)?;
        Student::from_params(arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32 + 1).to_le_bytes());
        let mut entry = |name: &str, shape: &[usize], values: &mut dyn Iterator<Item = f32>| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        entry(
            META_ENTRY,
            &[meta.len()],
            &mut meta.iter().map(|&b| b as f32),
        );
        for (name, t) in self.params.iter() {
            if name == META_ENTRY {
                return Err(Error::Format(format!(
                    "parameter name {META_ENTRY} is reserved"
                )));
            }
            entry(name, t.shape(), &mut t.data().iter().map(|&v| v as f32));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut meta = None;
        let mut params = ParamStore::new();
        for i in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let bytes_len = shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d));
            let raw = r.take(
                bytes_len.ok_or_else(|| Error::Format(format!("entry {name}: size overflow")))?,
            )?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == META_ENTRY {
                let json: Vec<u8> = values.iter().map(|&v| v as u8).collect();
                meta = Some(serde_json::from_slice(&json)?);
            } else {
                params.push(
                    name,
                    Tensor::new(&shape, values.iter().map(|&v| v as f64).collect())?,
                );
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let meta = meta.ok_or_else(|| Error::Format(format!("missing {META_ENTRY} entry")))?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
