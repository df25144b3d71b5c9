use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

/// Anchor layout on a single feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub stride: usize,
    /// Side length of a ratio-1 anchor, in pixels.
    pub scales: Vec<f64>,
    /// Width / height.
    pub ratios: Vec<f64>,
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors in row-major grid order; within a cell, scales vary slowest and
/// ratios fastest. Centres sit at cell centres.
pub fn generate_anchors(
    image_size: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<BoundingBox>> {
    if stride == 0 || !image_size.is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "anchor stride {stride} must divide image size {image_size}"
        )));
    }
    let grid = image_size / stride;
    let mut out = Vec::with_capacity(grid * grid * scales.len() * ratios.len());
    for gy in 0..grid {
        for gx in 0..grid {
            let cx = (gx as f64 + 0.5) * stride as f64;
            let cy = (gy as f64 + 0.5) * stride as f64;
            for &s in scales {
                for &r in ratios {
                    let root = r.sqrt();
                    out.push(BoundingBox::from_center(cx, cy, s * root, s / root));
                }
            }
        }
    }
    Ok(out)
}

/// Role of one anchor during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Positive anchor ids in increasing order.
    pub positive_indices: Vec<usize>,
    /// Ground-truth index for each entry of `positive_indices`.
    pub matched_gt: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl AnchorAssignment {
    pub fn num_positive(&self) -> usize {
        self.positive_indices.len()
    }
}

/// Max-IoU matching with forced positives for each ground truth's best anchor.
///
/// Ties go to the earlier ground truth, both when an anchor picks its best
/// ground truth and when two ground truths force the same anchor.
pub fn assign_anchors(
    anchors: &[BoundingBox],
    gt_boxes: &[BoundingBox],
    pos_thresh: f64,
    neg_thresh: f64,
) -> Result<AnchorAssignment> {
    if !(0.0..=1.0).contains(&neg_thresh) || !(neg_thresh..=1.0).contains(&pos_thresh) {
        return Err(Error::Config(format!(
            "need 0 <= neg ({neg_thresh}) <= pos ({pos_thresh}) <= 1"
        )));
    }
    let mut best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); anchors.len()];
    // best anchor per gt: (iou, anchor)
    let mut forced: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gt_boxes.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gt_boxes.iter().enumerate() {
            let iou = anchor.iou(gt);
            if iou > best[a].0 {
                best[a] = (iou, g);
            }
            if iou > forced[g].0 {
                forced[g] = (iou, a);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(iou, g)| {
            if g != usize::MAX && iou >= pos_thresh {
                AnchorLabel::Positive(g)
            } else if iou < neg_thresh {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            }
        })
        .collect();
    for (g, &(iou, a)) in forced.iter().enumerate().rev() {
        if iou > 0.0 {
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    let mut positive_indices = Vec::new();
    let mut matched_gt = Vec::new();
    let mut negatives = Vec::new();
    for (a, l) in labels.iter().enumerate() {
        match *l {
            AnchorLabel::Positive(g) => {
                positive_indices.push(a);
                matched_gt.push(g);
            }
            AnchorLabel::Negative => negatives.push(a),
            AnchorLabel::Ignored => {}
        }
    }
    Ok(AnchorAssignment {
        labels,
        positive_indices,
        matched_gt,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_and_squares() {
        let a = generate_anchors(64, 16, &[16.0], &[1.0]).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|b| (b.width() - b.height()).abs() < 1e-12));
        assert!(generate_anchors(64, 12, &[16.0], &[1.0]).is_err());
    }

    #[test]
    fn two_by_two_grid_by_hand() {
        let a = generate_anchors(16, 8, &[4.0, 8.0], &[1.0]).unwrap();
        let expected = [
            (4.0, 4.0, 4.0),
            (4.0, 4.0, 8.0),
            (12.0, 4.0, 4.0),
            (12.0, 4.0, 8.0),
            (4.0, 12.0, 4.0),
            (4.0, 12.0, 8.0),
            (12.0, 12.0, 4.0),
            (12.0, 12.0, 8.0),
        ];
        assert_eq!(a.len(), expected.len());
        for (b, &(cx, cy, s)) in a.iter().zip(&expected) {
            assert_eq!(
                *b,
                BoundingBox::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0)
            );
        }
    }

    #[test]
    fn identical_anchor_is_positive() {
        let anchors = generate_anchors(32, 8, &[8.0], &[1.0]).unwrap();
        let gt = anchors[5];
        let r = assign_anchors(&anchors, &[gt], 0.5, 0.4).unwrap();
        assert_eq!(r.labels[5], AnchorLabel::Positive(0));
        assert!(r.positive_indices.contains(&5));
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = generate_anchors(32, 8, &[8.0], &[1.0]).unwrap();
        let r = assign_anchors(&anchors, &[], 0.5, 0.4).unwrap();
        assert_eq!(r.num_positive(), 0);
        assert_eq!(r.negatives.len(), anchors.len());
    }

    #[test]
    fn three_anchors_two_boxes_by_iou_table() {
        let anchors = [
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            BoundingBox::new(5.0, 0.0, 15.0, 10.0),
            BoundingBox::new(20.0, 20.0, 30.0, 30.0),
        ];
        let gts = [
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            BoundingBox::new(22.0, 22.0, 30.0, 34.0),
        ];
        // IoU table worked out by hand:
        //   a0: g0 1.0, g1 0
        //   a1: g0 1/3, g1 0
        //   a2: g0 0,   g1 64/132
        let r = assign_anchors(&anchors, &gts, 0.5, 0.3).unwrap();
        assert_eq!(r.labels[0], AnchorLabel::Positive(0));
        assert_eq!(r.labels[1], AnchorLabel::Ignored);
        // Below 0.5 but forced as g1's best anchor.
        assert_eq!(r.labels[2], AnchorLabel::Positive(1));
        assert_eq!(r.positive_indices, vec![0, 2]);
        assert_eq!(r.matched_gt, vec![0, 1]);
    }

    #[test]
    fn first_ground_truth_wins_a_shared_best_anchor() {
        let anchors = [
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            BoundingBox::new(40.0, 40.0, 50.0, 50.0),
        ];
        let gts = [
            BoundingBox::new(0.0, 0.0, 4.0, 10.0),
            BoundingBox::new(6.0, 0.0, 10.0, 10.0),
        ];
        let r = assign_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
        assert_eq!(r.labels[0], AnchorLabel::Positive(0));
    }

    fn boxes() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0, 0.0..50.0, 6.0..24.0, 6.0..24.0)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn assignment_ignores_gt_order(gts in prop::collection::vec(boxes(), 1..4)) {
            let anchors = generate_anchors(64, 8, &[12.0, 24.0], &[1.0]).unwrap();
            // Two boxes competing for the same forced anchor is the documented tie rule.
            let best: Vec<usize> = gts
                .iter()
                .map(|g| {
                    let mut b = 0;
                    for (a, anchor) in anchors.iter().enumerate() {
                        if anchor.iou(g) > anchors[b].iou(g) {
                            b = a;
                        }
                    }
                    b
                })
                .collect();
            let mut distinct = best.clone();
            distinct.sort();
            distinct.dedup();
            prop_assume!(distinct.len() == best.len());
            let fwd = assign_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
            let rev: Vec<_> = gts.iter().rev().cloned().collect();
            let bwd = assign_anchors(&anchors, &rev, 0.5, 0.4).unwrap();
            let n = gts.len();
            for (a, (l1, l2)) in fwd.labels.iter().zip(&bwd.labels).enumerate() {
                match (l1, l2) {
                    (AnchorLabel::Positive(g1), AnchorLabel::Positive(g2)) => {
                        // Only exact IoU ties may resolve differently.
                        if *g1 != n - 1 - g2 {
                            let (i1, i2) = (anchors[a].iou(&gts[*g1]), anchors[a].iou(&gts[n - 1 - g2]));
                            prop_assert!((i1 - i2).abs() < 1e-12);
                        }
                    }
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
            prop_assert!(fwd.num_positive() >= 1);
        }
    }
}
