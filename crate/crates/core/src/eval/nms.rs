use super::Detection;

/// Orders detections by descending score; equal scores keep their input order.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy per-class suppression: a detection is dropped when it overlaps a
/// kept, higher-scoring detection of the same class by IoU > `iou_thresh`.
/// Output is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    sort_by_score(&mut dets);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.label == d.label && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BoundingBox;

    fn det(x: f64, label: usize, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0),
            label,
            score,
        }
    }

    #[test]
    fn single_detection_unchanged() {
        let d = vec![det(0.0, 0, 0.5)];
        assert_eq!(nms(d.clone(), 0.5), d);
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        let out = nms(vec![det(0.0, 0, 0.3), det(0.0, 0, 0.9)], 0.5);
        assert_eq!(out, vec![det(0.0, 0, 0.9)]);
    }

    /// Exhaustive oracle: a box survives iff no surviving box of the same
    /// class with a higher rank overlaps it, evaluated in rank order.
    #[test]
    fn five_boxes_against_oracle() {
        let dets = vec![
            det(0.0, 0, 0.9),
            det(3.0, 0, 0.8), // IoU with first = 7/13 > 0.5 -> suppressed
            det(6.0, 0, 0.7), // IoU with first = 4/16 -> kept
            det(8.0, 0, 0.6), // IoU with third = 8/12 -> suppressed
            det(3.0, 1, 0.5), // other class -> kept
        ];
        let out = nms(dets.clone(), 0.5);
        let mut alive = [true; 5];
        for i in 0..5 {
            for j in 0..i {
                if alive[j]
                    && dets[j].label == dets[i].label
                    && dets[j].bbox.iou(&dets[i].bbox) > 0.5
                {
                    alive[i] = false;
                }
            }
        }
        let expected: Vec<Detection> = dets
            .iter()
            .zip(alive)
            .filter(|(_, a)| *a)
            .map(|(d, _)| *d)
            .collect();
        assert_eq!(out, expected);
        assert_eq!(out.len(), 3);
    }
}
