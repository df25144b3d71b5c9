//! Optimisation: the combined objective, SGD and the teacher and student loops.

mod batches;
mod sgd;
mod student;
mod teacher;

use serde::{Deserialize, Serialize};

use crate::diffmath::Var;
use crate::error::{Error, Result};
use crate::kd_loc::{DistillConfig, LocLayer};

pub use batches::{epoch_plan, for_each_prefetched, prefetch_threads, EpochPlan};
pub use sgd::{LrSchedule, Sgd};
pub use student::{
    detect_all, evaluate_detector, train_student, StudentEpoch, StudentRun, StudentRunConfig,
    ASSIGN_NEG_IOU, ASSIGN_POS_IOU,
};
pub use teacher::{
    evaluate_teacher, teacher_loss, train_teacher, TeacherEpoch, TeacherLossKind, TeacherRun,
    TeacherRunConfig,
};

/// Which distillation terms join the detection loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub kd_cls: bool,
    /// Localization distillation over the configured layer set.
    pub kd_loc: bool,
    /// Teacher-free pixel term; adds `l0` to the layer set.
    pub kd_loc0: bool,
}

impl LossTerms {
    /// Layers the localization term compares, or `None` when it is off.
    pub fn loc_layers(&self, cfg: &DistillConfig) -> Option<Vec<LocLayer>> {
        let mut layers = Vec::new();
        if self.kd_loc {
            layers.extend(cfg.layers.iter().copied());
        }
        if self.kd_loc0 {
            layers.push(LocLayer::Pixels);
        }
        layers.sort();
        layers.dedup();
        (!layers.is_empty()).then_some(layers)
    }

    /// Whether any enabled term reads the teacher.
    pub fn needs_teacher(&self, cfg: &DistillConfig) -> bool {
        self.kd_cls
            || self
                .loc_layers(cfg)
                .is_some_and(|l| l.iter().any(|x| x.block().is_some()))
    }
}

/// `det + λ_kc·kd_cls + λ_kl·kd_loc`. Absent terms and zero weights add
/// nothing to the graph, so the result is then exactly `det`.
pub fn total_loss<'t>(
    det: Var<'t>,
    kd_cls: Option<Var<'t>>,
    kd_loc: Option<Var<'t>>,
    cfg: &DistillConfig,
) -> Result<Var<'t>> {
    let check = |name: &str, v: Var<'t>| -> Result<()> {
        let x = v.item()?;
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("{name} loss is {x}")))
        }
    };
    check("detection", det)?;
    let mut total = det;
    for (name, term, weight) in [
        ("kd_cls", kd_cls, cfg.lambda_kc),
        ("kd_loc", kd_loc, cfg.lambda_kl),
    ] {
        if let Some(t) = term {
            check(name, t)?;
            if weight != 0.0 {
                total = total.add(t.scale(weight)?)?;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{Tape, Tensor};

    #[test]
    fn zero_weights_return_the_detection_loss() {
        let tape = Tape::new();
        let det = tape.param(Tensor::scalar(1.25));
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.param(Tensor::scalar(5.0));
        let cfg = DistillConfig {
            lambda_kc: 0.0,
            lambda_kl: 0.0,
            ..DistillConfig::default()
        };
        let t = total_loss(det, Some(a), Some(b), &cfg).unwrap();
        assert_eq!(t.id(), det.id());
        assert_eq!(
            total_loss(det, None, None, &DistillConfig::default())
                .unwrap()
                .id(),
            det.id()
        );
    }

    #[test]
    fn gradient_is_the_weighted_sum_of_terms() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        let det = x.powf(2.0).unwrap().sum().unwrap();
        let kc = x.exp().unwrap().sum().unwrap();
        let kl = x.abs().unwrap().sum().unwrap();
        let cfg = DistillConfig {
            lambda_kc: 0.4,
            lambda_kl: 1.5,
            ..DistillConfig::default()
        };
        let g = tape
            .backward(total_loss(det, Some(kc), Some(kl), &cfg).unwrap())
            .unwrap()
            .tensor(x);
        let parts: Vec<Tensor> = [det, kc, kl]
            .iter()
            .map(|&t| tape.backward(t).unwrap().tensor(x))
            .collect();
        for i in 0..3 {
            let want = parts[0].data()[i] + 0.4 * parts[1].data()[i] + 1.5 * parts[2].data()[i];
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_component_is_named() {
        let tape = Tape::new();
        let det = tape.scalar(1.0);
        let bad = tape.scalar(f64::NAN);
        let err = total_loss(det, None, Some(bad), &DistillConfig::default()).unwrap_err();
        assert!(err.to_string().contains("kd_loc"), "{err}");
    }

    #[test]
    fn layer_selection_and_teacher_requirement() {
        let cfg = DistillConfig::default();
        let only_pixels = LossTerms {
            kd_loc0: true,
            ..LossTerms::default()
        };
        assert_eq!(only_pixels.loc_layers(&cfg), Some(vec![LocLayer::Pixels]));
        assert!(!only_pixels.needs_teacher(&cfg));
        let loc = LossTerms {
            kd_loc: true,
            ..LossTerms::default()
        };
        assert!(loc.needs_teacher(&cfg));
        assert!(LossTerms {
            kd_cls: true,
            ..LossTerms::default()
        }
        .needs_teacher(&cfg));
        assert_eq!(LossTerms::default().loc_layers(&cfg), None);
    }
}
