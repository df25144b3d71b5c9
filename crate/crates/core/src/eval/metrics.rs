use serde::{Deserialize, Serialize};

use super::nms::sort_by_score;
use super::Detection;
use crate::bbox::{Annotation, BoundingBox};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Evaluation settings; the size cutoffs are areas in square pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_detections: usize,
    pub small_area: f64,
    pub large_area: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_detections: 100,
            small_area: 12.0 * 12.0,
            large_area: 24.0 * 24.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    fn contains(&self, area: f64) -> bool {
        area >= self.lo && area <= self.hi
    }
}

/// Matching of one image's detections of one class against its ground truth.
#[derive(Clone, Debug, Default)]
pub(crate) struct ImageMatch {
    /// Matched ground-truth index (into the class's gt list) per detection.
    pub det_gt: Vec<Option<usize>>,
    pub det_ignored: Vec<bool>,
    pub gt_ignored: Vec<bool>,
}

/// Greedy matching in the given (descending score) order. Each detection
/// takes the unmatched ground truth with the highest IoU ≥ `thresh`,
/// preferring non-ignored ground truths; the first one wins exact ties.
pub(crate) fn match_detections(
    dets: &[Detection],
    gts: &[BoundingBox],
    thresh: f64,
    range: AreaRange,
) -> ImageMatch {
    let gt_ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
    let mut gt_matched = vec![false; gts.len()];
    let mut det_gt = vec![None; dets.len()];
    let mut det_ignored = vec![false; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, gt) in gts.iter().enumerate() {
                if gt_matched[g] || gt_ignored[g] != pass_ignored {
                    continue;
                }
                let iou = det.bbox.iou(gt);
                if iou >= thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if best.is_some() {
                break;
            }
        }
        match best {
            Some((g, _)) => {
                gt_matched[g] = true;
                det_gt[d] = Some(g);
                det_ignored[d] = gt_ignored[g];
            }
            None => det_ignored[d] = !range.contains(det.bbox.area()),
        }
    }
    ImageMatch {
        det_gt,
        det_ignored,
        gt_ignored,
    }
}

/// Detections of `class` in one image, best first, capped at `max_dets`.
pub(crate) fn class_detections(
    dets: &[Detection],
    class: usize,
    max_dets: usize,
) -> Vec<Detection> {
    let mut out: Vec<Detection> = dets.iter().filter(|d| d.label == class).copied().collect();
    sort_by_score(&mut out);
    out.truncate(max_dets);
    out
}

pub(crate) fn class_gts(gt: &Annotation, class: usize) -> Vec<BoundingBox> {
    gt.iter()
        .filter(|(_, l)| *l == class)
        .map(|(b, _)| *b)
        .collect()
}

/// AP and final recall of one class at one threshold; `None` when the class
/// has no (non-ignored) ground truth.
pub(crate) fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    class: usize,
    thresh: f64,
    range: AreaRange,
    max_dets: usize,
) -> Option<(f64, f64)> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut positives = 0usize;
    for (image_dets, gt) in dets.iter().zip(gts) {
        let ds = class_detections(image_dets, class, max_dets);
        let gs = class_gts(gt, class);
        let m = match_detections(&ds, &gs, thresh, range);
        positives += m.gt_ignored.iter().filter(|&&i| !i).count();
        for (d, det) in ds.iter().enumerate() {
            if !m.det_ignored[d] {
                scored.push((det.score, m.det_gt[d].is_some()));
            }
        }
    }
    if positives == 0 {
        return None;
    }
    // Stable: equal scores keep image order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &scored {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some((total / 101.0, recall.last().copied().unwrap_or(0.0)))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// AP of one class at one IoU threshold over all images.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    class: usize,
    iou_thresh: f64,
) -> Option<f64> {
    class_ap(dets, gts, class, iou_thresh, AreaRange::ALL, 100).map(|(ap, _)| ap)
}

/// Class-mean AP at one threshold (classes without ground truth excluded).
pub fn mean_ap_at(
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    classes: usize,
    iou_thresh: f64,
    cfg: &EvalConfig,
) -> Option<f64> {
    mean_defined((0..classes).map(|c| {
        class_ap(dets, gts, c, iou_thresh, AreaRange::ALL, cfg.max_detections).map(|r| r.0)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoMetrics {
    pub thresholds: Vec<f64>,
    /// Class-mean AP at each threshold.
    pub ap_per_threshold: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "mAR")]
    pub mar: f64,
    #[serde(rename = "AP_small")]
    pub ap_small: Option<f64>,
    #[serde(rename = "AP_medium")]
    pub ap_medium: Option<f64>,
    #[serde(rename = "AP_large")]
    pub ap_large: Option<f64>,
    /// Per class, AP averaged over thresholds; `None` without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
}

/// COCO-style summary over thresholds 0.50:0.95. Undefined means (no ground
/// truth at all) are reported as 0.
pub fn coco_metrics(
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    classes: usize,
    cfg: &EvalConfig,
) -> CocoMetrics {
    let thresholds = coco_thresholds();
    let table: Vec<Vec<Option<(f64, f64)>>> = (0..classes)
        .map(|c| {
            thresholds
                .iter()
                .map(|&t| class_ap(dets, gts, c, t, AreaRange::ALL, cfg.max_detections))
                .collect()
        })
        .collect();
    let ap_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|i| mean_defined(table.iter().map(|row| row[i].map(|r| r.0))).unwrap_or(0.0))
        .collect();
    let map = ap_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
    let mar = mean_defined(
        table
            .iter()
            .flat_map(|row| row.iter().map(|r| r.map(|x| x.1))),
    )
    .unwrap_or(0.0);
    let per_class_ap = table
        .iter()
        .map(|row| mean_defined(row.iter().map(|r| r.map(|x| x.0))))
        .collect();
    let bucket = |range: AreaRange| {
        let per_threshold: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| {
                mean_defined(
                    (0..classes)
                        .map(|c| class_ap(dets, gts, c, t, range, cfg.max_detections).map(|r| r.0)),
                )
            })
            .collect();
        mean_defined(per_threshold.into_iter())
    };
    CocoMetrics {
        ap50: ap_per_threshold[0],
        ap75: ap_per_threshold[5],
        map,
        mar,
        ap_small: bucket(AreaRange {
            lo: 0.0,
            hi: cfg.small_area,
        }),
        ap_medium: bucket(AreaRange {
            lo: cfg.small_area,
            hi: cfg.large_area,
        }),
        ap_large: bucket(AreaRange {
            lo: cfg.large_area,
            hi: f64::INFINITY,
        }),
        ap_per_threshold,
        per_class_ap,
        thresholds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: BoundingBox, label: usize, score: f64) -> Detection {
        Detection {
            bbox: b,
            label,
            score,
        }
    }

    fn gt(boxes: &[BoundingBox], labels: &[usize]) -> Annotation {
        Annotation {
            boxes: boxes.to_vec(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn iou_example() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty() {
        let boxes = [
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            BoundingBox::new(20.0, 20.0, 40.0, 40.0),
        ];
        let gts = vec![gt(&boxes, &[0, 1])];
        let dets = vec![vec![det(boxes[0], 0, 1.0), det(boxes[1], 1, 1.0)]];
        let m = coco_metrics(&dets, &gts, 2, &EvalConfig::default());
        assert!(m.ap_per_threshold.iter().all(|&a| a == 1.0));
        assert_eq!((m.map, m.ap50, m.ap75, m.mar), (1.0, 1.0, 1.0, 1.0));
        let none = vec![vec![]];
        assert_eq!(average_precision(&none, &gts, 0, 0.5), Some(0.0));
        assert_eq!(average_precision(&dets, &gts, 5, 0.5), None);
    }

    #[test]
    fn three_detections_two_ground_truths() {
        let g = [
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            BoundingBox::new(30.0, 30.0, 40.0, 40.0),
        ];
        let gts = vec![gt(&g, &[0, 0])];
        let dets = vec![vec![
            det(BoundingBox::new(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(BoundingBox::new(50.0, 50.0, 60.0, 60.0), 0, 0.8),
            det(BoundingBox::new(30.0, 30.0, 40.0, 41.0), 0, 0.7),
        ]];
        // ranks: TP, FP, TP -> (P, R) = (1, .5), (.5, .5), (2/3, 1)
        // envelope: recall <= .5 -> 1, recall in (.5, 1] -> 2/3
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((average_precision(&dets, &gts, 0, 0.5).unwrap() - expected).abs() < 1e-12);
    }

    /// Max precision over every rank whose recall reaches the level.
    fn oracle_ap(dets: &[Vec<Detection>], gts: &[Annotation], class: usize, t: f64) -> Option<f64> {
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for (i, ds) in dets.iter().enumerate() {
            for (j, d) in ds.iter().enumerate() {
                if d.label == class {
                    all.push((d.score, i, j));
                }
            }
        }
        let npos: usize = gts
            .iter()
            .map(|g| g.labels.iter().filter(|&&l| l == class).count())
            .sum();
        if npos == 0 {
            return None;
        }
        // Match each image independently in score order.
        let mut hit = std::collections::HashMap::new();
        for (i, ds) in dets.iter().enumerate() {
            let mut order: Vec<usize> = (0..ds.len()).filter(|&j| ds[j].label == class).collect();
            order.sort_by(|&a, &b| ds[b].score.total_cmp(&ds[a].score));
            let gs: Vec<BoundingBox> = gts[i]
                .iter()
                .filter(|(_, l)| *l == class)
                .map(|(b, _)| *b)
                .collect();
            let mut used = vec![false; gs.len()];
            for j in order {
                let mut best: Option<(usize, f64)> = None;
                for (g, gb) in gs.iter().enumerate() {
                    let iou = ds[j].bbox.iou(gb);
                    if !used[g] && iou >= t && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                if let Some((g, _)) = best {
                    used[g] = true;
                }
                hit.insert((i, j), best.is_some());
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut pr = Vec::new();
        let mut tp = 0;
        for (k, &(_, i, j)) in all.iter().enumerate() {
            if hit[&(i, j)] {
                tp += 1;
            }
            pr.push((tp as f64 / (k + 1) as f64, tp as f64 / npos as f64));
        }
        let mut total = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            total += pr
                .iter()
                .filter(|(_, rec)| *rec >= level)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max);
        }
        Some(total / 101.0)
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Annotation>) {
        let rbox = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            BoundingBox::new(
                x,
                y,
                x + rng.random_range(4.0..20.0),
                y + rng.random_range(4.0..20.0),
            )
        };
        let images = rng.random_range(1..4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        let mut budget = 10;
        for _ in 0..images {
            let ng = rng.random_range(0..4);
            let g: Vec<BoundingBox> = (0..ng).map(|_| rbox(rng)).collect();
            let labels: Vec<usize> = (0..ng).map(|_| rng.random_range(0..2)).collect();
            let nd = rng.random_range(0..=budget.min(5));
            budget -= nd;
            let mut ds = Vec::new();
            for _ in 0..nd {
                // Mostly jittered copies of ground truth so matches happen.
                let b = if !g.is_empty() && rng.random::<f64>() < 0.7 {
                    let s = g[rng.random_range(0..g.len())];
                    let j = |rng: &mut ChaCha8Rng| rng.random_range(-2.0..2.0);
                    BoundingBox::new(s.x1 + j(rng), s.y1 + j(rng), s.x2 + j(rng), s.y2 + j(rng))
                } else {
                    rbox(rng)
                };
                ds.push(det(b, rng.random_range(0..2), rng.random::<f64>()));
            }
            dets.push(ds);
            gts.push(Annotation { boxes: g, labels });
        }
        (dets, gts)
    }

    #[test]
    fn matches_brute_force_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..60 {
            let (dets, gts) = random_case(&mut rng);
            for class in 0..2 {
                for t in [0.5, 0.75] {
                    let got = average_precision(&dets, &gts, class, t);
                    let want = oracle_ap(&dets, &gts, class, t);
                    match (got, want) {
                        (Some(a), Some(b)) => {
                            assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}")
                        }
                        (a, b) => assert_eq!(a, b, "case {case}"),
                    }
                }
            }
        }
    }

    #[test]
    fn map_is_mean_of_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (dets, gts) = random_case(&mut rng);
        let m = coco_metrics(&dets, &gts, 2, &EvalConfig::default());
        let mean = m.ap_per_threshold.iter().sum::<f64>() / 10.0;
        assert_eq!(m.map, mean);
        assert_eq!(m.thresholds.len(), 10);
    }

    #[test]
    fn size_buckets_split_objects() {
        let small = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let large = BoundingBox::new(30.0, 30.0, 60.0, 60.0);
        let gts = vec![gt(&[small, large], &[0, 0])];
        // Only the large object is found.
        let dets = vec![vec![det(large, 0, 0.9)]];
        let m = coco_metrics(&dets, &gts, 1, &EvalConfig::default());
        assert_eq!(m.ap_large, Some(1.0));
        assert_eq!(m.ap_small, Some(0.0));
        assert_eq!(m.ap_medium, None);
    }

    proptest! {
        #[test]
        fn ap_rank_invariant_and_monotone(seed in 0u64..1000, factor in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (dets, gts) = random_case(&mut rng);
            let scaled: Vec<Vec<Detection>> = dets
                .iter()
                .map(|ds| ds.iter().map(|d| Detection { score: d.score * factor, ..*d }).collect())
                .collect();
            let mut prev = f64::INFINITY;
            for t in coco_thresholds() {
                let a = mean_ap_at(&dets, &gts, 2, t, &EvalConfig::default());
                let b = mean_ap_at(&scaled, &gts, 2, t, &EvalConfig::default());
                prop_assert_eq!(a, b);
                if let Some(a) = a {
                    prop_assert!(a <= prev + 1e-12);
                    prev = a;
                }
            }
        }
    }
}
