//! Classification distillation: temperature-softened teacher and student
//! distributions and the KL losses between them.
//!
//! Categorical heads compare `C+1`-way softmax distributions, the teacher's
//! being padded with a zero background column. Binary heads expand every
//! per-class sigmoid score into a (false, true) pair and compare those pairs.

use serde::{Deserialize, Serialize};

use crate::diffmath::{concat, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Classification head family of a detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `C+1`-way softmax with a trailing background class.
    Categorical,
    /// `C` independent sigmoids.
    Binary,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Categorical => "categorical",
            HeadKind::Binary => "binary",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(HeadKind::Categorical),
            "binary" => Ok(HeadKind::Binary),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Softened probabilities of `K` objects.
///
/// Categorical: `probs` is `[K, D]`, one distribution per row. Binary:
/// `probs` is `[K, 2C]` where columns `2c, 2c+1` hold the (false, true) pair
/// of class `c`.
#[derive(Clone, Copy, Debug)]
pub struct SoftenedDistribution<'t> {
    pub probs: Var<'t>,
    /// Log-probabilities when they can be computed more accurately than
    /// `ln(probs)`. Zero-probability entries carry a log of 0.
    pub log_probs: Option<Var<'t>>,
    pub temperature: f64,
    pub kind: HeadKind,
}

impl<'t> SoftenedDistribution<'t> {
    pub fn rows(&self) -> usize {
        self.probs.shape()[0]
    }

    fn logs(&self) -> Result<Var<'t>> {
        match self.log_probs {
            Some(l) => Ok(l),
            None => self.probs.ln(),
        }
    }
}

fn check_logits(z: Var<'_>, name: &str) -> Result<(usize, usize)> {
    match z.shape()[..] {
        [k, c] => Ok((k, c)),
        ref s => Err(shape_err!("{name} logits must be [K, C], got {s:?}")),
    }
}

/// Softmax at temperature `T` over the last axis, keeping exact log-probs.
pub fn soften_categorical<'t>(
    logits: Var<'t>,
    temperature: f64,
) -> Result<SoftenedDistribution<'t>> {
    check_logits(logits, "categorical")?;
    Ok(SoftenedDistribution {
        probs: logits.softmax_t(temperature)?,
        log_probs: Some(logits.log_softmax_t(temperature)?),
        temperature,
        kind: HeadKind::Categorical,
    })
}

/// Per-class sigmoids at temperature `T` expanded to (false, true) pairs.
///
/// The false entry is `sigmoid(-z/T)`, equal to `1 - sigmoid(z/T)` without the
/// cancellation when the score saturates.
pub fn soften_binary<'t>(logits: Var<'t>, temperature: f64) -> Result<SoftenedDistribution<'t>> {
    let (k, c) = check_logits(logits, "binary")?;
    let neg = logits.neg()?;
    let pairs = |a: Var<'t>, b: Var<'t>| -> Result<Var<'t>> {
        concat(&[a.reshape(&[k, c, 1])?, b.reshape(&[k, c, 1])?], 2)?.reshape(&[k, 2 * c])
    };
    Ok(SoftenedDistribution {
        probs: pairs(neg.sigmoid_t(temperature)?, logits.sigmoid_t(temperature)?)?,
        log_probs: Some(pairs(
            neg.log_sigmoid_t(temperature)?,
            logits.log_sigmoid_t(temperature)?,
        )?),
        temperature,
        kind: HeadKind::Binary,
    })
}

/// Appends an all-zero background column to a teacher's `C`-way distribution.
pub fn teacher_background_augment<'t>(
    pt: &SoftenedDistribution<'t>,
) -> Result<SoftenedDistribution<'t>> {
    if pt.kind != HeadKind::Categorical {
        return Err(Error::Kind(
            "background augmentation needs a categorical distribution".into(),
        ));
    }
    let tape = pt.probs.tape();
    let k = pt.rows();
    let zeros = tape.constant(Tensor::zeros(&[k, 1]));
    let log_probs = match pt.log_probs {
        Some(l) => Some(concat(&[l, zeros], 1)?),
        None => None,
    };
    Ok(SoftenedDistribution {
        probs: concat(&[pt.probs, zeros], 1)?,
        log_probs,
        temperature: pt.temperature,
        kind: HeadKind::Categorical,
    })
}

/// Turns scores `p[K, C]` in (0, 1) into (false, true) pairs `[1-p, p]`.
pub fn binary_two_class_expand<'t>(
    p: Var<'t>,
    temperature: f64,
) -> Result<SoftenedDistribution<'t>> {
    let (k, c) = check_logits(p, "binary score")?;
    if let Some(bad) = p.value().data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("binary score {bad} outside (0, 1)")));
    }
    let q = p.neg()?.add_scalar(1.0)?;
    let probs =
        concat(&[q.reshape(&[k, c, 1])?, p.reshape(&[k, c, 1])?], 2)?.reshape(&[k, 2 * c])?;
    Ok(SoftenedDistribution {
        probs,
        log_probs: None,
        temperature,
        kind: HeadKind::Binary,
    })
}

/// `Σ p_t·(log p_t − log p_s)` with the teacher held constant and `0·log 0 = 0`.
fn divergence_sum<'t>(
    pt: &SoftenedDistribution<'t>,
    ps: &SoftenedDistribution<'t>,
) -> Result<Var<'t>> {
    if pt.probs.shape() != ps.probs.shape() {
        return Err(shape_err!(
            "teacher {:?} and student {:?} distributions differ in shape",
            pt.probs.shape(),
            ps.probs.shape()
        ));
    }
    if pt.temperature != ps.temperature {
        return Err(shape_err!(
            "teacher temperature {} differs from student temperature {}",
            pt.temperature,
            ps.temperature
        ));
    }
    let tape = ps.probs.tape();
    let p = pt.probs.value();
    let teacher_log: Vec<f64> = match pt.log_probs {
        Some(l) => l.value().data().to_vec(),
        None => p
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v.ln() } else { 0.0 })
            .collect(),
    };
    let weights = tape.constant((*p).clone());
    let teacher_log = tape.constant(Tensor::new(p.shape(), teacher_log)?);
    let gap = teacher_log.sub(ps.logs()?)?;
    // Rounding can leave an essentially-zero divergence a hair below zero.
    weights.mul(gap)?.sum()?.relu()
}

/// KL divergence of categorical distributions averaged over the `K` rows and
/// scaled by `T²`.
pub fn kl_categorical<'t>(
    pt: &SoftenedDistribution<'t>,
    ps: &SoftenedDistribution<'t>,
    temperature: f64,
) -> Result<Var<'t>> {
    if pt.kind != HeadKind::Categorical || ps.kind != HeadKind::Categorical {
        return Err(Error::Kind(
            "kl_categorical needs categorical distributions".into(),
        ));
    }
    if pt.temperature != temperature {
        return Err(shape_err!(
            "distribution temperature {} != {temperature}",
            pt.temperature
        ));
    }
    let k = pt.rows();
    divergence_sum(pt, ps)?.scale(temperature * temperature / k as f64)
}

/// KL divergence of (false, true) pairs summed over `C` classes, scaled by
/// `T²/C` and averaged over the `K` objects.
pub fn kl_binary<'t>(
    pt: &SoftenedDistribution<'t>,
    ps: &SoftenedDistribution<'t>,
    temperature: f64,
    classes: usize,
) -> Result<Var<'t>> {
    if pt.kind != HeadKind::Binary || ps.kind != HeadKind::Binary {
        return Err(Error::Kind("kl_binary needs binary distributions".into()));
    }
    if pt.temperature != temperature {
        return Err(shape_err!(
            "distribution temperature {} != {temperature}",
            pt.temperature
        ));
    }
    let (k, cols) = (pt.rows(), pt.probs.shape()[1]);
    if cols != 2 * classes {
        return Err(shape_err!(
            "expected {} pair columns for {classes} classes, got {cols}",
            2 * classes
        ));
    }
    divergence_sum(pt, ps)?.scale(temperature * temperature / (classes * k) as f64)
}

/// Distillation loss between student logits and teacher logits of the same
/// `K` positive objects. The teacher is treated as a constant.
///
/// Categorical: student `[K, C+1]`, teacher `[K, C]`. Binary: both `[K, C]`.
/// With `K = 0` the result is an exact zero that carries no gradient.
pub fn kd_cls_loss<'t>(
    student_logits: Var<'t>,
    teacher_logits: Var<'t>,
    kind: HeadKind,
    temperature: f64,
) -> Result<Var<'t>> {
    let tape: &'t Tape = student_logits.tape();
    let (ks, cs) = check_logits(student_logits, "student")?;
    let (kt, ct) = check_logits(teacher_logits, "teacher")?;
    if ks != kt {
        return Err(shape_err!("student has {ks} objects, teacher {kt}"));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let teacher = teacher_logits.detach();
    match kind {
        HeadKind::Categorical => {
            if cs != ct + 1 {
                return Err(shape_err!(
                    "categorical student needs C+1 = {} columns, got {cs}",
                    ct + 1
                ));
            }
            if ks == 0 {
                return Ok(tape.scalar(0.0));
            }
            let pt = teacher_background_augment(&soften_categorical(teacher, temperature)?)?;
            let ps = soften_categorical(student_logits, temperature)?;
            kl_categorical(&pt, &ps, temperature)
        }
        HeadKind::Binary => {
            if cs != ct {
                return Err(shape_err!(
                    "binary student and teacher class counts differ: {cs} vs {ct}"
                ));
            }
            if ks == 0 {
                return Ok(tape.scalar(0.0));
            }
            let pt = soften_binary(teacher, temperature)?;
            let ps = soften_binary(student_logits, temperature)?;
            kl_binary(&pt, &ps, temperature, cs)
        }
    }
}
