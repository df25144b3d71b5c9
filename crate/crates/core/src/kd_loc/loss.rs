use super::sample::{adaptive_avg_pool, boxes_to_affine, spatial_transform_crop};
use super::DistillConfig;
use crate::bbox::BoundingBox;
use crate::diffmath::{concat, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::models::Teacher;

/// Predicted boxes narrower or shorter than this many pixels are skipped.
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Rows of `boxes: [K, 4]` that are wide enough and overlap a `w × h` image.
pub fn usable_boxes(boxes: &Tensor, w: f64, h: f64) -> Vec<usize> {
    boxes
        .data()
        .chunks(4)
        .enumerate()
        .filter(|(_, b)| {
            let ok = b.iter().all(|v| v.is_finite());
            ok && b[2] - b[0] >= MIN_BOX_SIDE
                && b[3] - b[1] >= MIN_BOX_SIDE
                && b[2] > 0.0
                && b[3] > 0.0
                && b[0] < w
                && b[1] < h
        })
        .map(|(i, _)| i)
        .collect()
}

/// Crops of the usable predicted boxes and their ground truths.
struct RegionPair<'t> {
    pred: Var<'t>,
    gt: Var<'t>,
    k: usize,
}

fn region_pair<'t>(
    pred: Var<'t>,
    gt: &[BoundingBox],
    images: Var<'t>,
    image_index: &[usize],
    cfg: &DistillConfig,
) -> Result<Option<RegionPair<'t>>> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[1] != 4 || shape[0] != gt.len() || gt.len() != image_index.len() {
        return Err(shape_err!(
            "need [K, 4] predicted boxes with K ground truths and image indices, got {shape:?}, {} and {}",
            gt.len(),
            image_index.len()
        ));
    }
    let img_shape = images.shape();
    if img_shape.len() != 4 {
        return Err(shape_err!("images must be [N, C, H, W], got {img_shape:?}"));
    }
    let (h, w) = (img_shape[2] as f64, img_shape[3] as f64);
    let keep = usable_boxes(&pred.value(), w, h);
    if keep.is_empty() {
        return Ok(None);
    }
    let pred = if keep.len() == gt.len() {
        pred
    } else {
        pred.index_select(&keep)?
    };
    let index: Vec<usize> = keep.iter().map(|&i| image_index[i]).collect();
    let gt_data: Vec<f64> = keep.iter().flat_map(|&i| gt[i].to_array()).collect();
    let tape = pred.tape();
    let gt_boxes = tape.constant(Tensor::new(&[keep.len(), 4], gt_data)?);
    let s = cfg.sampling_size;
    let images = images.detach();
    let pred_crop = spatial_transform_crop(boxes_to_affine(pred, w, h)?, images, &index, s)?;
    let gt_crop =
        spatial_transform_crop(boxes_to_affine(gt_boxes, w, h)?, images, &index, s)?.detach();
    Ok(Some(RegionPair {
        pred: pred_crop,
        gt: gt_crop,
        k: keep.len(),
    }))
}

/// Pools both `[K, M, H, W]` maps and returns `Σ|a − b| / (K·M·pool_h·pool_w)`.
fn pooled_l1<'t>(a: Var<'t>, b: Var<'t>, k: usize, cfg: &DistillConfig) -> Result<Var<'t>> {
    let m = a.shape()[1];
    let pa = adaptive_avg_pool(a, cfg.pool_h, cfg.pool_w)?;
    let pb = adaptive_avg_pool(b, cfg.pool_h, cfg.pool_w)?;
    pa.sub(pb)?
        .abs()?
        .sum()?
        .scale(1.0 / (k * m * cfg.pool_h * cfg.pool_w) as f64)
}

/// Teacher-free term comparing pooled raw crops.
///
/// `pred: [K, 4]` are predicted corner boxes, `gt[k]` the box matched to
/// row `k` and `image_index[k]` its image in `images: [N, C, H, W]`.
/// Degenerate or fully outside predictions are dropped from `K`; with no
/// usable rows the loss is exactly 0.
pub fn kd_loc_pixel_loss<'t>(
    pred: Var<'t>,
    gt: &[BoundingBox],
    images: Var<'t>,
    image_index: &[usize],
    cfg: &DistillConfig,
) -> Result<Var<'t>> {
    let tape = pred.tape();
    match region_pair(pred, gt, images, image_index, cfg)? {
        None => Ok(tape.scalar(0.0)),
        Some(r) => pooled_l1(r.pred, r.gt, r.k, cfg),
    }
}

/// Per-layer feature terms, in the order of `cfg.feature_layers()`.
fn feature_terms<'t>(
    pair: &RegionPair<'t>,
    teacher: &Teacher,
    teacher_params: &[Var<'t>],
    cfg: &DistillConfig,
) -> Result<Vec<Var<'t>>> {
    let layers = cfg.feature_layers();
    let depth = layers.iter().filter_map(|l| l.block()).max().unwrap_or(0);
    let frozen: Vec<Var<'t>> = teacher_params.iter().map(|p| p.detach()).collect();
    let both = concat(&[pair.pred, pair.gt], 0)?;
    let maps = teacher.feature_maps(&frozen, both, depth)?;
    let k = pair.k;
    layers
        .iter()
        .map(|l| {
            let f = maps[l.block().unwrap() - 1];
            let fp = f.narrow(0, 0, k)?;
            let fg = f.narrow(0, k, k)?.detach();
            pooled_l1(fp, fg, k, cfg)
        })
        .collect()
}

fn require_feature_layers(cfg: &DistillConfig) -> Result<()> {
    if cfg.feature_layers().is_empty() {
        Err(Error::Config(
            "feature distillation needs l1 or l2 in the layer set".into(),
        ))
    } else {
        Ok(())
    }
}

/// Term comparing pooled teacher features of predicted and ground-truth
/// crops, averaged over the teacher blocks in `cfg.layers`. Each block is
/// normalized by its own channel count.
pub fn kd_loc_feature_loss<'t>(
    pred: Var<'t>,
    gt: &[BoundingBox],
    images: Var<'t>,
    image_index: &[usize],
    teacher: &Teacher,
    teacher_params: &[Var<'t>],
    cfg: &DistillConfig,
) -> Result<Var<'t>> {
    require_feature_layers(cfg)?;
    let tape = pred.tape();
    let Some(pair) = region_pair(pred, gt, images, image_index, cfg)? else {
        return Ok(tape.scalar(0.0));
    };
    let terms = feature_terms(&pair, teacher, teacher_params, cfg)?;
    let n = terms.len();
    concat(
        &terms
            .iter()
            .map(|t| t.reshape(&[1]))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?
    .sum()?
    .scale(1.0 / n as f64)
}

/// Combined localization term: the mean of the pixel term (when `l0` is
/// configured) and one feature term per configured teacher block.
///
/// `teacher` may be `None` only when the layer set is `{l0}`.
pub fn kd_loc_loss<'t>(
    pred: Var<'t>,
    gt: &[BoundingBox],
    images: Var<'t>,
    image_index: &[usize],
    teacher: Option<(&Teacher, &[Var<'t>])>,
    cfg: &DistillConfig,
) -> Result<Var<'t>> {
    if cfg.layers.is_empty() {
        return Err(Error::Config(
            "localization distillation needs at least one layer".into(),
        ));
    }
    let tape = pred.tape();
    let features = !cfg.feature_layers().is_empty();
    if features && teacher.is_none() {
        return Err(Error::Config(
            "teacher blocks in the layer set need a teacher".into(),
        ));
    }
    let Some(pair) = region_pair(pred, gt, images, image_index, cfg)? else {
        return Ok(tape.scalar(0.0));
    };
    let mut terms = Vec::new();
    if cfg.uses_pixels() {
        terms.push(pooled_l1(pair.pred, pair.gt, pair.k, cfg)?);
    }
    if let (true, Some((t, p))) = (features, teacher) {
        terms.extend(feature_terms(&pair, t, p, cfg)?);
    }
    let n = terms.len();
    concat(
        &terms
            .iter()
            .map(|t| t.reshape(&[1]))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?
    .sum()?
    .scale(1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check_many, Tape};
    use crate::kd_loc::LocLayer;
    use crate::models::TeacherArch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(s: usize, pool: usize, layers: &[LocLayer]) -> DistillConfig {
        DistillConfig {
            sampling_size: s,
            pool_h: pool,
            pool_w: pool,
            layers: layers.to_vec(),
            ..DistillConfig::default()
        }
    }

    /// `[N, 3, S, S]` images `a_c·x + b_c·y + o_c` over pixel centres.
    fn ramp(n: usize, size: usize, coef: &[[f64; 3]; 3]) -> Tensor {
        Tensor::from_fn(&[n, 3, size, size], |i| {
            let x = (i % size) as f64;
            let y = ((i / size) % size) as f64;
            let c = (i / (size * size)) % 3;
            coef[c][0] * x + coef[c][1] * y + coef[c][2]
        })
    }

    /// Smooth, gently curved images for finite differences.
    fn wavy(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
        let phase: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..6.0)).collect();
        Tensor::from_fn(&[n, 3, size, size], |i| {
            let x = (i % size) as f64;
            let y = ((i / size) % size) as f64;
            0.5 + 0.3 * (0.15 * x + 0.1 * y + phase[i / (size * size)]).sin()
        })
    }

    fn boxes_tensor(b: &[BoundingBox]) -> Tensor {
        Tensor::new(&[b.len(), 4], b.iter().flat_map(|b| b.to_array()).collect()).unwrap()
    }

    fn teacher() -> Teacher {
        Teacher::new(TeacherArch::new(16, 4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn equal_boxes_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = wavy(&mut rng, 2, 32);
        let gt = [
            BoundingBox::new(3.0, 4.0, 20.0, 17.0),
            BoundingBox::new(10.5, 2.0, 30.0, 29.0),
        ];
        let t = teacher();
        let tape = Tape::new();
        let p = t.params.bind(&tape, false);
        let pred = tape.param(boxes_tensor(&gt));
        let images = tape.constant(img);
        let c = cfg(
            16,
            4,
            &[LocLayer::Pixels, LocLayer::Block1, LocLayer::Block2],
        );
        assert_eq!(
            kd_loc_pixel_loss(pred, &gt, images, &[0, 1], &c)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
        let f = kd_loc_feature_loss(pred, &gt, images, &[0, 1], &t, &p, &c).unwrap();
        assert_eq!(f.item().unwrap(), 0.0);
        assert_eq!(
            kd_loc_loss(pred, &gt, images, &[0, 1], Some((&t, &p)), &c)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn constant_image_gives_zero_for_any_boxes() {
        let gt = [BoundingBox::new(4.0, 4.0, 20.0, 20.0)];
        let pred = [BoundingBox::new(9.0, 6.0, 25.0, 22.0)];
        let t = teacher();
        let tape = Tape::new();
        let p = t.params.bind(&tape, false);
        let images = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.4));
        let pv = tape.param(boxes_tensor(&pred));
        let c = cfg(16, 4, &[LocLayer::Pixels, LocLayer::Block1]);
        assert_eq!(
            kd_loc_pixel_loss(pv, &gt, images, &[0], &c)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
        // Translation only: both crops are the same constant patch.
        assert_eq!(
            kd_loc_feature_loss(pv, &gt, images, &[0], &t, &p, &c)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_or_unusable_boxes_give_zero() {
        let tape = Tape::new();
        let images = tape.constant(Tensor::full(&[1, 3, 16, 16], 0.4));
        let c = cfg(4, 2, &[LocLayer::Pixels]);
        let none = tape.param(Tensor::zeros(&[0, 4]));
        assert_eq!(
            kd_loc_pixel_loss(none, &[], images, &[], &c)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
        let gt = [
            BoundingBox::new(1.0, 1.0, 5.0, 5.0),
            BoundingBox::new(1.0, 1.0, 5.0, 5.0),
        ];
        let bad = tape.param(boxes_tensor(&[
            BoundingBox::new(5.0, 1.0, 4.0, 5.0),
            BoundingBox::new(20.0, 1.0, 30.0, 5.0),
        ]));
        assert_eq!(
            kd_loc_pixel_loss(bad, &gt, images, &[0, 0], &c)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn unusable_rows_are_left_out_of_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = wavy(&mut rng, 1, 32);
        let gt = [
            BoundingBox::new(3.0, 3.0, 15.0, 15.0),
            BoundingBox::new(3.0, 3.0, 15.0, 15.0),
        ];
        let good = BoundingBox::new(5.0, 4.0, 16.0, 14.0);
        let c = cfg(8, 4, &[LocLayer::Pixels]);
        let tape = Tape::new();
        let images = tape.constant(img);
        let alone = kd_loc_pixel_loss(
            tape.param(boxes_tensor(&[good])),
            &gt[..1],
            images,
            &[0],
            &c,
        )
        .unwrap();
        let mixed = kd_loc_pixel_loss(
            tape.param(boxes_tensor(&[good, BoundingBox::new(9.0, 9.0, 9.2, 20.0)])),
            &gt,
            images,
            &[0, 0],
            &c,
        )
        .unwrap();
        assert_eq!(alone.item().unwrap(), mixed.item().unwrap());
    }

    #[test]
    fn unit_shift_on_a_ramp_costs_the_slope() {
        let coef = [[0.02, 0.01, 0.1], [-0.03, 0.0, 0.9], [0.0, 0.05, 0.2]];
        let img = ramp(1, 32, &coef);
        let gt = [BoundingBox::new(6.0, 5.0, 18.0, 21.0)];
        let pred = [BoundingBox::new(7.0, 5.0, 19.0, 21.0)];
        let tape = Tape::new();
        let loss = kd_loc_pixel_loss(
            tape.param(boxes_tensor(&pred)),
            &gt,
            tape.constant(img),
            &[0],
            &cfg(8, 4, &[LocLayer::Pixels]),
        )
        .unwrap();
        // Every sample moves one pixel right, so each channel differs by |a_c|.
        let want = coef.iter().map(|c| c[0].abs()).sum::<f64>() / 3.0;
        assert!((loss.item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_pool_only_sees_crop_means() {
        // A horizontal ramp has the same mean over any two boxes sharing a centre.
        let img = ramp(1, 32, &[[0.03, 0.0, 0.1]; 3]);
        let gt = [BoundingBox::new(8.0, 8.0, 20.0, 20.0)];
        let pred = [BoundingBox::new(11.0, 8.0, 17.0, 20.0)];
        let tape = Tape::new();
        let run = |pool| {
            kd_loc_pixel_loss(
                tape.param(boxes_tensor(&pred)),
                &gt,
                tape.constant(img.clone()),
                &[0],
                &cfg(8, pool, &[LocLayer::Pixels]),
            )
            .unwrap()
            .item()
            .unwrap()
        };
        assert!(run(1).abs() < 1e-12);
        assert!(run(4) > 1e-3);
    }

    #[test]
    fn feature_loss_matches_composed_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = wavy(&mut rng, 2, 24);
        let gt = [
            BoundingBox::new(2.0, 3.0, 14.0, 16.0),
            BoundingBox::new(8.0, 6.0, 22.0, 20.0),
        ];
        let pred = [
            BoundingBox::new(3.5, 2.0, 15.0, 18.0),
            BoundingBox::new(6.0, 7.0, 21.0, 19.5),
        ];
        let index = [1, 0];
        let c = cfg(8, 2, &[LocLayer::Block1, LocLayer::Block2]);
        let t = teacher();
        let tape = Tape::new();
        let p = t.params.bind(&tape, false);
        let images = tape.constant(img.clone());
        let got = kd_loc_feature_loss(
            tape.param(boxes_tensor(&pred)),
            &gt,
            images,
            &index,
            &t,
            &p,
            &c,
        )
        .unwrap()
        .item()
        .unwrap();

        // One box at a time, then plain loops over the pooled maps.
        let pooled = |b: &BoundingBox, n: usize, block: usize| {
            let theta = super::super::box_to_affine(b, 24.0, 24.0).unwrap().0;
            let crop = spatial_transform_crop(
                tape.constant(Tensor::new(&[1, 6], theta.to_vec()).unwrap()),
                images,
                &[n],
                8,
            )
            .unwrap();
            let f = t.feature_maps(&p, crop, 2).unwrap()[block - 1];
            adaptive_avg_pool(f, 2, 2).unwrap().value()
        };
        let mut total = 0.0;
        for block in [1, 2] {
            let mut sum = 0.0;
            let mut m = 0;
            for k in 0..2 {
                let a = pooled(&pred[k], index[k], block);
                let b = pooled(&gt[k], index[k], block);
                m = a.shape()[1];
                sum += a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>();
            }
            total += sum / (2 * m * 4) as f64;
        }
        let want = total / 2.0;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn combined_loss_averages_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = wavy(&mut rng, 1, 32);
        let gt = [BoundingBox::new(4.0, 4.0, 20.0, 22.0)];
        let pred = [BoundingBox::new(6.0, 3.0, 23.0, 20.0)];
        let t = teacher();
        let tape = Tape::new();
        let p = t.params.bind(&tape, false);
        let images = tape.constant(img);
        let pv = tape.param(boxes_tensor(&pred));
        let all = cfg(
            16,
            4,
            &[LocLayer::Pixels, LocLayer::Block1, LocLayer::Block2],
        );
        let px = kd_loc_pixel_loss(pv, &gt, images, &[0], &all)
            .unwrap()
            .item()
            .unwrap();
        let ft = kd_loc_feature_loss(pv, &gt, images, &[0], &t, &p, &all)
            .unwrap()
            .item()
            .unwrap();
        let both = kd_loc_loss(pv, &gt, images, &[0], Some((&t, &p)), &all)
            .unwrap()
            .item()
            .unwrap();
        assert!((both - (px + 2.0 * ft) / 3.0).abs() < 1e-12);
        assert!(kd_loc_loss(pv, &gt, images, &[0], None, &all).is_err());
        let pixels_only = cfg(16, 4, &[LocLayer::Pixels]);
        assert_eq!(
            kd_loc_loss(pv, &gt, images, &[0], None, &pixels_only)
                .unwrap()
                .item()
                .unwrap(),
            px
        );
        assert!(kd_loc_feature_loss(pv, &gt, images, &[0], &t, &p, &pixels_only).is_err());
    }

    #[test]
    fn gradient_reaches_predicted_boxes_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = wavy(&mut rng, 1, 32);
        let gt = [BoundingBox::new(4.0, 4.0, 20.0, 22.0)];
        let t = teacher();
        let tape = Tape::new();
        let p = t.params.bind(&tape, true);
        let images = tape.param(img);
        let pv = tape.param(boxes_tensor(&[BoundingBox::new(6.0, 3.0, 23.0, 20.0)]));
        let loss = kd_loc_loss(
            pv,
            &gt,
            images,
            &[0],
            Some((&t, &p)),
            &cfg(16, 4, &[LocLayer::Pixels, LocLayer::Block1]),
        )
        .unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.tensor(pv).data().iter().any(|&v| v != 0.0));
        assert!(g.tensor(images).data().iter().all(|&v| v == 0.0));
        for &q in &p {
            assert!(g.tensor(q).data().iter().all(|&v| v == 0.0));
        }
    }

    fn random_pairs(
        rng: &mut ChaCha8Rng,
        k: usize,
        size: f64,
    ) -> (Vec<BoundingBox>, Vec<BoundingBox>) {
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..k {
            let (x, y) = (
                rng.random_range(2.0..size / 2.0),
                rng.random_range(2.0..size / 2.0),
            );
            let (w, h) = (
                rng.random_range(6.0..size / 2.0 - 2.0),
                rng.random_range(6.0..size / 2.0 - 2.0),
            );
            gt.push(BoundingBox::new(x, y, x + w, y + h));
            let j = |r: &mut ChaCha8Rng| r.random_range(-2.0..2.0);
            pred.push(BoundingBox::new(
                x + j(rng),
                y + j(rng),
                x + w + j(rng),
                y + h + j(rng),
            ));
        }
        (pred, gt)
    }

    #[test]
    fn pixel_loss_gradients_over_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = wavy(&mut rng, 2, 24);
            let (pred, gt) = random_pairs(&mut rng, 3, 24.0);
            let c = cfg(8, 4, &[LocLayer::Pixels]);
            let report = grad_check_many(
                |t, v| kd_loc_pixel_loss(v[0], &gt, t.constant(img.clone()), &[0, 1, 1], &c),
                &[boxes_tensor(&pred)],
                1e-4,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-3, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn feature_loss_gradients_over_seeds() {
        let t = teacher();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let img = wavy(&mut rng, 1, 24);
            let (pred, gt) = random_pairs(&mut rng, 2, 24.0);
            let c = cfg(8, 2, &[LocLayer::Block1, LocLayer::Block2]);
            let report = grad_check_many(
                |tape, v| {
                    let p = t.params.bind(tape, false);
                    kd_loc_feature_loss(v[0], &gt, tape.constant(img.clone()), &[0, 0], &t, &p, &c)
                },
                &[boxes_tensor(&pred)],
                1e-4,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-3, "seed {seed}: {report:?}");
        }
    }
}
