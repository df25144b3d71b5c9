//! Six-way breakdown of detection errors at a foreground IoU threshold.

use serde::{Deserialize, Serialize};

use super::metrics::{class_detections, match_detections, mean_ap_at, AreaRange, EvalConfig};
use super::Detection;
use crate::bbox::Annotation;

/// Below this IoU with every ground truth a detection is background.
pub const BACKGROUND_IOU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Classification,
    Localization,
    Both,
    Duplicate,
    Background,
    Missed,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 6] = [
        ErrorKind::Classification,
        ErrorKind::Localization,
        ErrorKind::Both,
        ErrorKind::Duplicate,
        ErrorKind::Background,
        ErrorKind::Missed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Classification => "classification",
            ErrorKind::Localization => "localization",
            ErrorKind::Both => "both",
            ErrorKind::Duplicate => "duplicate",
            ErrorKind::Background => "background",
            ErrorKind::Missed => "missed",
        }
    }
}

/// Per-type values in [`ErrorKind::ALL`] order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerKind<T> {
    pub classification: T,
    pub localization: T,
    pub both: T,
    pub duplicate: T,
    pub background: T,
    pub missed: T,
}

impl<T> PerKind<T> {
    pub fn get(&self, k: ErrorKind) -> &T {
        match k {
            ErrorKind::Classification => &self.classification,
            ErrorKind::Localization => &self.localization,
            ErrorKind::Both => &self.both,
            ErrorKind::Duplicate => &self.duplicate,
            ErrorKind::Background => &self.background,
            ErrorKind::Missed => &self.missed,
        }
    }

    pub fn get_mut(&mut self, k: ErrorKind) -> &mut T {
        match k {
            ErrorKind::Classification => &mut self.classification,
            ErrorKind::Localization => &mut self.localization,
            ErrorKind::Both => &mut self.both,
            ErrorKind::Duplicate => &mut self.duplicate,
            ErrorKind::Background => &mut self.background,
            ErrorKind::Missed => &mut self.missed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub iou_threshold: f64,
    pub detections: usize,
    pub true_positives: usize,
    pub counts: PerKind<usize>,
    /// Class-mean AP at the threshold before any correction.
    pub ap: f64,
    /// AP gained when the errors of one type are corrected by an oracle.
    pub delta_ap: PerKind<f64>,
}

impl ErrorReport {
    pub fn false_positives(&self) -> usize {
        ErrorKind::ALL
            .iter()
            .filter(|&&k| k != ErrorKind::Missed)
            .map(|&k| *self.counts.get(k))
            .sum()
    }
}

/// Outcome of one evaluated detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Verdict {
    TruePositive,
    Error {
        kind: ErrorKind,
        /// Ground truth used when correcting the error (index into the image's annotation).
        target: Option<usize>,
    },
}

/// Classified detections of one image plus the indices of missed ground truths:
/// those neither matched nor targeted by a classification or localization error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageVerdicts {
    /// `(detection, verdict)` for every evaluated detection.
    pub detections: Vec<(Detection, Verdict)>,
    pub missed: Vec<usize>,
}

/// Matches at `thresh` per class, then types each unmatched detection.
///
/// Precedence: background (max IoU with any ground truth < 0.1), duplicate
/// (same class, IoU ≥ thresh with an already-matched box), classification
/// (other class, IoU ≥ thresh), localization (same class, IoU ≥ 0.1),
/// both (other class, 0.1 ≤ IoU < thresh).
pub fn classify_image(
    dets: &[Detection],
    gt: &Annotation,
    classes: usize,
    thresh: f64,
    max_dets: usize,
) -> ImageVerdicts {
    let mut out = ImageVerdicts::default();
    let mut gt_matched = vec![false; gt.len()];
    for class in 0..classes {
        let ds = class_detections(dets, class, max_dets);
        let idx: Vec<usize> = (0..gt.len()).filter(|&g| gt.labels[g] == class).collect();
        let boxes: Vec<_> = idx.iter().map(|&g| gt.boxes[g]).collect();
        let m = match_detections(&ds, &boxes, thresh, AreaRange::ALL);
        for (d, det) in ds.iter().enumerate() {
            let verdict = match m.det_gt[d] {
                Some(local) => {
                    gt_matched[idx[local]] = true;
                    Verdict::TruePositive
                }
                None => type_error(det, gt, thresh),
            };
            out.detections.push((*det, verdict));
        }
    }
    for (_, v) in &out.detections {
        if let Verdict::Error {
            kind: ErrorKind::Classification | ErrorKind::Localization,
            target: Some(g),
        } = v
        {
            gt_matched[*g] = true;
        }
    }
    out.missed = (0..gt.len()).filter(|&g| !gt_matched[g]).collect();
    out
}

fn type_error(det: &Detection, gt: &Annotation, thresh: f64) -> Verdict {
    let best = |same: bool| {
        gt.iter()
            .enumerate()
            .filter(|(_, (_, l))| (*l == det.label) == same)
            .map(|(g, (b, _))| (g, det.bbox.iou(b)))
            .fold(None, |acc: Option<(usize, f64)>, (g, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((g, iou)),
            })
    };
    let same = best(true);
    let other = best(false);
    let iou_of = |x: Option<(usize, f64)>| x.map_or(0.0, |(_, i)| i);
    let error = |kind, target: Option<(usize, f64)>| Verdict::Error {
        kind,
        target: target.map(|(g, _)| g),
    };
    if iou_of(same).max(iou_of(other)) < BACKGROUND_IOU {
        error(ErrorKind::Background, None)
    } else if iou_of(same) >= thresh {
        error(ErrorKind::Duplicate, same)
    } else if iou_of(other) >= thresh {
        error(ErrorKind::Classification, other)
    } else if iou_of(same) >= BACKGROUND_IOU {
        error(ErrorKind::Localization, same)
    } else {
        error(ErrorKind::Both, other)
    }
}

/// Error counts and oracle AP gains at one threshold.
pub fn error_decomposition(
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    classes: usize,
    thresh: f64,
    cfg: &EvalConfig,
) -> ErrorReport {
    let verdicts: Vec<ImageVerdicts> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| classify_image(d, g, classes, thresh, cfg.max_detections))
        .collect();
    let mut counts = PerKind::<usize>::default();
    let mut detections = 0;
    let mut true_positives = 0;
    for v in &verdicts {
        detections += v.detections.len();
        for (_, verdict) in &v.detections {
            match verdict {
                Verdict::TruePositive => true_positives += 1,
                Verdict::Error { kind, .. } => *counts.get_mut(*kind) += 1,
            }
        }
        counts.missed += v.missed.len();
    }
    let ap = mean_ap_at(dets, gts, classes, thresh, cfg).unwrap_or(0.0);
    let mut delta_ap = PerKind::<f64>::default();
    for kind in ErrorKind::ALL {
        let (fd, fg) = oracle_fix(&verdicts, gts, kind);
        let fixed = mean_ap_at(&fd, &fg, classes, thresh, cfg).unwrap_or(0.0);
        *delta_ap.get_mut(kind) = fixed - ap;
    }
    ErrorReport {
        iou_threshold: thresh,
        detections,
        true_positives,
        counts,
        ap,
        delta_ap,
    }
}

/// Corrects every error of `kind`: relabel classification errors, snap
/// localization errors onto their ground truth, drop duplicate, background
/// and both errors, and drop missed ground truths.
fn oracle_fix(
    verdicts: &[ImageVerdicts],
    gts: &[Annotation],
    kind: ErrorKind,
) -> (Vec<Vec<Detection>>, Vec<Annotation>) {
    let mut dets = Vec::with_capacity(verdicts.len());
    let mut fixed_gts = Vec::with_capacity(gts.len());
    for (v, gt) in verdicts.iter().zip(gts) {
        let mut ds = Vec::with_capacity(v.detections.len());
        for &(det, verdict) in &v.detections {
            match verdict {
                Verdict::Error { kind: k, target } if k == kind => match (k, target) {
                    (ErrorKind::Classification, Some(g)) => ds.push(Detection {
                        label: gt.labels[g],
                        ..det
                    }),
                    (ErrorKind::Localization, Some(g)) => ds.push(Detection {
                        bbox: gt.boxes[g],
                        ..det
                    }),
                    _ => {}
                },
                _ => ds.push(det),
            }
        }
        dets.push(ds);
        if kind == ErrorKind::Missed {
            let keep: Vec<usize> = (0..gt.len()).filter(|g| !v.missed.contains(g)).collect();
            fixed_gts.push(Annotation {
                boxes: keep.iter().map(|&g| gt.boxes[g]).collect(),
                labels: keep.iter().map(|&g| gt.labels[g]).collect(),
            });
        } else {
            fixed_gts.push(gt.clone());
        }
    }
    (dets, fixed_gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BoundingBox;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, label: usize, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(x1, y1, x2, y2),
            label,
            score,
        }
    }

    /// Ground truth: class 0 at (0,0,20,20), class 1 at (40,0,60,20),
    /// class 0 at (0,40,20,60), class 0 at (40,40,60,60) (never detected).
    fn fixture() -> (Vec<Detection>, Annotation) {
        let gt = Annotation {
            boxes: vec![
                BoundingBox::new(0.0, 0.0, 20.0, 20.0),
                BoundingBox::new(40.0, 0.0, 60.0, 20.0),
                BoundingBox::new(0.0, 40.0, 20.0, 60.0),
                BoundingBox::new(40.0, 40.0, 60.0, 60.0),
            ],
            labels: vec![0, 1, 0, 0],
        };
        let dets = vec![
            det(0.0, 0.0, 20.0, 20.0, 0, 0.95),  // true positive on gt 0
            det(0.0, 2.0, 20.0, 22.0, 0, 0.9),   // IoU 0.82 with gt 0: duplicate
            det(40.0, 0.0, 60.0, 20.0, 0, 0.85), // right box, wrong class: classification
            det(0.0, 48.0, 20.0, 68.0, 0, 0.8),  // IoU 0.43 with gt 2: localization
            det(48.0, 0.0, 68.0, 20.0, 2, 0.75), // wrong class, IoU 0.43 with gt 1: both
            det(80.0, 80.0, 90.0, 90.0, 1, 0.7), // background
        ];
        (dets, gt)
    }

    #[test]
    fn six_detection_fixture_hits_every_type_once() {
        let (dets, gt) = fixture();
        let r = error_decomposition(
            std::slice::from_ref(&dets),
            &[gt],
            3,
            0.5,
            &EvalConfig::default(),
        );
        assert_eq!(r.detections, 6);
        assert_eq!(r.true_positives, 1);
        for kind in ErrorKind::ALL {
            assert_eq!(*r.counts.get(kind), 1, "{kind:?}");
        }
        assert_eq!(r.true_positives + r.false_positives(), r.detections);
        for kind in ErrorKind::ALL {
            assert!(
                *r.delta_ap.get(kind) >= 0.0,
                "{kind:?}: {}",
                r.delta_ap.get(kind)
            );
        }
        for kind in [
            ErrorKind::Classification,
            ErrorKind::Localization,
            ErrorKind::Missed,
        ] {
            assert!(*r.delta_ap.get(kind) > 0.0, "{kind:?}");
        }
    }

    #[test]
    fn perfect_detections_have_no_errors() {
        let (_, gt) = fixture();
        let dets: Vec<Detection> = gt
            .iter()
            .map(|(b, l)| Detection {
                bbox: *b,
                label: l,
                score: 1.0,
            })
            .collect();
        let r = error_decomposition(&[dets], &[gt], 2, 0.5, &EvalConfig::default());
        assert_eq!(r.true_positives, 4);
        assert!(ErrorKind::ALL.iter().all(|&k| *r.counts.get(k) == 0));
    }

    #[test]
    fn wrong_label_is_one_classification_error() {
        let (_, gt) = fixture();
        let d = Detection {
            bbox: gt.boxes[0],
            label: 1,
            score: 0.5,
        };
        let v = classify_image(&[d], &gt, 2, 0.5, 100);
        assert_eq!(
            v.detections[0].1,
            Verdict::Error {
                kind: ErrorKind::Classification,
                target: Some(0)
            }
        );
    }

    #[test]
    fn stricter_threshold_turns_hits_into_localization_errors() {
        let (dets, gt) = fixture();
        for t in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let r = error_decomposition(
                std::slice::from_ref(&dets),
                std::slice::from_ref(&gt),
                3,
                t,
                &EvalConfig::default(),
            );
            assert_eq!(r.true_positives + r.false_positives(), r.detections);
        }
        // The duplicate (IoU 0.82) becomes a localization error above 0.82.
        let r = error_decomposition(&[dets], &[gt], 3, 0.85, &EvalConfig::default());
        assert_eq!(r.counts.duplicate, 0);
        assert_eq!(r.counts.localization, 2);
    }
}
