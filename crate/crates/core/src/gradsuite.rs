//! Finite-difference checks of every differentiable operation and loss,
//! each over many random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bbox::{Annotation, BoundingBox};
use crate::diffmath::{
    conv2d, grad_check_many, linear_map, BackwardRule, ReduceMode, Tape, Tensor, Var,
};
use crate::error::Result;
use crate::kd_cls::{kd_cls_loss, HeadKind};
use crate::kd_loc::{
    adaptive_avg_pool, boxes_to_affine, kd_loc_feature_loss, kd_loc_pixel_loss,
    spatial_transform_crop, DistillConfig, LocLayer,
};
use crate::models::{
    assign_anchors, decode_boxes, detection_loss, generate_anchors, DetectionLossConfig,
    StudentOutput, Teacher, TeacherArch,
};
use crate::train::total_loss;

pub const EPS: f64 = 1e-4;
pub const THRESHOLD: f64 = 1e-3;
pub const DEFAULT_SEEDS: usize = 20;

/// Name of the deliberately broken check used as a negative control.
pub const CORRUPTED: &str = "corrupted_backward";

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("pointwise", pointwise),
    ("linear_map", linear),
    ("conv2d", conv),
    ("reduce", reduce),
    ("softmax_t", softmax),
    ("sigmoid_t", sigmoid),
    ("decode_boxes", decode),
    ("spatial_transform_crop", crop),
    ("adaptive_avg_pool", pool),
    ("kd_cls_loss_categorical", kd_cls_categorical),
    ("kd_cls_loss_binary", kd_cls_binary),
    ("kd_loc_feature_loss", kd_loc_feature),
    ("kd_loc_pixel_loss", kd_loc_pixel),
    ("detection_loss", detection),
    ("total_loss", total),
];

/// Names of the regular checks, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub max_relative_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

/// Runs the checks whose name contains `filter` (all when `None`), each on
/// `seeds` instances drawn from `seed`. `corrupted` appends the negative
/// control.
pub fn run_suite(
    seed: u64,
    seeds: usize,
    filter: Option<&str>,
    corrupted: bool,
) -> Result<Vec<CheckResult>> {
    let mut selected: Vec<(&str, CheckFn)> = CHECKS
        .iter()
        .copied()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .collect();
    if corrupted {
        selected.push((CORRUPTED, corrupted_square));
    }
    selected
        .into_iter()
        .map(|(name, check)| {
            let mut worst = (0.0f64, seed);
            for i in 0..seeds as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i);
                let err = check(&mut rng)?;
                if err > worst.0 || err.is_nan() {
                    worst = (err, i);
                }
            }
            Ok(CheckResult {
                name: name.to_string(),
                seeds,
                max_relative_error: worst.0,
                worst_seed: worst.1,
                passed: worst.0 < THRESHOLD,
            })
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.2, 1.5)` so kinks at 0 stay out of reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ x` with random fixed weights, so every output coordinate counts.
fn weighted<'t>(tape: &'t Tape, x: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    x.mul(tape.constant(w.clone().reshape(&x.shape())?))?.sum()
}

fn check(
    inputs: &[Tensor],
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
) -> Result<f64> {
    Ok(grad_check_many(f, inputs, EPS)?.max_relative_error)
}

fn pointwise(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = away_from_zero(rng, &[12]);
    let y = uniform(rng, &[12], -1.0, 1.0);
    let w: Vec<Tensor> = (0..11).map(|_| uniform(rng, &[12], -1.0, 1.0)).collect();
    check(&[x, y], |t, v| {
        let (x, y) = (v[0], v[1]);
        let terms = [
            x.exp()?,
            x.abs()?.add_scalar(0.5)?.ln()?,
            x.relu()?,
            x.abs()?,
            x.powf(3.0)?,
            x.smooth_l1(0.1)?,
            x.mul(y)?,
            x.add(y)?,
            x.sub(y)?.scale(-0.7)?,
            x.add_scalar(2.0)?.neg()?,
            y.powf(2.0)?,
        ];
        let mut total = t.scalar(0.0);
        for (term, w) in terms.iter().zip(&w) {
            total = total.add(weighted(t, *term, w)?)?;
        }
        Ok(total)
    })
}

fn linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = uniform(rng, &[3, 4], -1.0, 1.0);
    let w = uniform(rng, &[4, 5], -1.0, 1.0);
    let b = uniform(rng, &[5], -1.0, 1.0);
    let out_w = uniform(rng, &[15], -1.0, 1.0);
    check(&[x, w, b], |t, v| {
        weighted(t, linear_map(v[0], v[1], v[2])?, &out_w)
    })
}

fn conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (stride, pad) = if rng.random_bool(0.5) { (2, 1) } else { (1, 0) };
    let x = uniform(rng, &[2, 2, 5, 5], -1.0, 1.0);
    let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[3], -1.0, 1.0);
    let side = (5 + 2 * pad - 3) / stride + 1;
    let out_w = uniform(rng, &[2 * 3 * side * side], -1.0, 1.0);
    check(&[x, k, b], |t, v| {
        weighted(t, conv2d(v[0], v[1], Some(v[2]), stride, pad)?, &out_w)
    })
}

fn reduce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [3, 4, 5];
    let mut axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
    if axes.is_empty() {
        axes.push(rng.random_range(0..3));
    }
    let mode = [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max][rng.random_range(0..3)];
    let x = uniform(rng, &shape, -1.0, 1.0);
    let kept: usize = (0..3)
        .filter(|a| !axes.contains(a))
        .map(|a| shape[a])
        .product();
    let out_w = uniform(rng, &[kept], -1.0, 1.0);
    check(&[x], |t, v| weighted(t, v[0].reduce(&axes, mode)?, &out_w))
}

fn temperature(rng: &mut ChaCha8Rng) -> f64 {
    [0.5, 1.0, 2.0, 4.0][rng.random_range(0..4)]
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let temp = temperature(rng);
    let x = uniform(rng, &[4, 5], -3.0, 3.0);
    let (w1, w2) = (
        uniform(rng, &[20], -1.0, 1.0),
        uniform(rng, &[20], -1.0, 1.0),
    );
    check(&[x], |t, v| {
        weighted(t, v[0].softmax_t(temp)?, &w1)?.add(weighted(t, v[0].log_softmax_t(temp)?, &w2)?)
    })
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let temp = temperature(rng);
    let x = uniform(rng, &[4, 5], -3.0, 3.0);
    let (w1, w2) = (
        uniform(rng, &[20], -1.0, 1.0),
        uniform(rng, &[20], -1.0, 1.0),
    );
    check(&[x], |t, v| {
        weighted(t, v[0].sigmoid_t(temp)?, &w1)?.add(weighted(t, v[0].log_sigmoid_t(temp)?, &w2)?)
    })
}

fn random_box(rng: &mut ChaCha8Rng, size: f64, min_side: f64) -> BoundingBox {
    let w = rng.random_range(min_side..size / 2.0);
    let h = rng.random_range(min_side..size / 2.0);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BoundingBox::new(x, y, x + w, y + h)
}

fn boxes_tensor(b: &[BoundingBox]) -> Result<Tensor> {
    Tensor::new(&[b.len(), 4], b.iter().flat_map(|b| b.to_array()).collect())
}

fn decode(rng: &mut ChaCha8Rng) -> Result<f64> {
    let anchors: Vec<BoundingBox> = (0..5).map(|_| random_box(rng, 64.0, 4.0)).collect();
    let offsets = uniform(rng, &[5, 4], -0.5, 0.5);
    let out_w = uniform(rng, &[20], -1.0, 1.0);
    check(&[offsets], |t, v| {
        weighted(t, decode_boxes(&anchors, v[0])?, &out_w)
    })
}

/// Smooth `[n, 3, size, size]` image.
fn wavy(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
    let phase: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..6.0)).collect();
    Tensor::from_fn(&[n, 3, size, size], |i| {
        let x = (i % size) as f64;
        let y = ((i / size) % size) as f64;
        0.5 + 0.3 * (0.15 * x + 0.1 * y + phase[i / (size * size)]).sin()
    })
}

fn crop(rng: &mut ChaCha8Rng) -> Result<f64> {
    let images = wavy(rng, 2, 12);
    let boxes: Vec<BoundingBox> = (0..3).map(|_| random_box(rng, 12.0, 3.0)).collect();
    let tape = Tape::new();
    let theta = boxes_to_affine(tape.constant(boxes_tensor(&boxes)?), 12.0, 12.0)?.value();
    let out_w = uniform(rng, &[3 * 3 * 5 * 5], -1.0, 1.0);
    check(&[(*theta).clone(), images], |t, v| {
        weighted(
            t,
            spatial_transform_crop(v[0], v[1], &[0, 1, 1], 5)?,
            &out_w,
        )
    })
}

fn pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
    let (oh, ow) = (rng.random_range(1..=h), rng.random_range(1..=w));
    let x = uniform(rng, &[2, 3, h, w], -1.0, 1.0);
    let out_w = uniform(rng, &[6 * oh * ow], -1.0, 1.0);
    check(&[x], |t, v| {
        weighted(t, adaptive_avg_pool(v[0], oh, ow)?, &out_w)
    })
}

fn kd_cls_categorical(rng: &mut ChaCha8Rng) -> Result<f64> {
    let temp = temperature(rng);
    let student = uniform(rng, &[4, 6], -3.0, 3.0);
    let teacher = uniform(rng, &[4, 5], -3.0, 3.0);
    check(&[student], |t, v| {
        kd_cls_loss(
            v[0],
            t.constant(teacher.clone()),
            HeadKind::Categorical,
            temp,
        )
    })
}

fn kd_cls_binary(rng: &mut ChaCha8Rng) -> Result<f64> {
    let temp = temperature(rng);
    let student = uniform(rng, &[4, 5], -3.0, 3.0);
    let teacher = uniform(rng, &[4, 5], -3.0, 3.0);
    check(&[student], |t, v| {
        kd_cls_loss(v[0], t.constant(teacher.clone()), HeadKind::Binary, temp)
    })
}

/// Ground-truth boxes and jittered predictions inside a `size` image.
fn box_pairs(rng: &mut ChaCha8Rng, k: usize, size: f64) -> (Vec<BoundingBox>, Vec<BoundingBox>) {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..k {
        let b = random_box(rng, size, 6.0);
        let mut j = || rng.random_range(-2.0..2.0);
        pred.push(BoundingBox::new(
            b.x1 + j(),
            b.y1 + j(),
            b.x2 + j(),
            b.y2 + j(),
        ));
        gt.push(b);
    }
    (pred, gt)
}

fn loc_config(layers: &[LocLayer], s: usize, pool: usize) -> DistillConfig {
    DistillConfig {
        sampling_size: s,
        pool_h: pool,
        pool_w: pool,
        layers: layers.to_vec(),
        ..DistillConfig::default()
    }
}

fn kd_loc_feature(rng: &mut ChaCha8Rng) -> Result<f64> {
    let teacher = Teacher::new(TeacherArch::new(16, 4), rng)?;
    let images = wavy(rng, 2, 24);
    let (pred, gt) = box_pairs(rng, 3, 24.0);
    let cfg = loc_config(&[LocLayer::Block1, LocLayer::Block2], 8, 2);
    check(&[boxes_tensor(&pred)?], |t, v| {
        let p = teacher.params.bind(t, false);
        kd_loc_feature_loss(
            v[0],
            &gt,
            t.constant(images.clone()),
            &[0, 1, 1],
            &teacher,
            &p,
            &cfg,
        )
    })
}

fn kd_loc_pixel(rng: &mut ChaCha8Rng) -> Result<f64> {
    let images = wavy(rng, 2, 24);
    let (pred, gt) = box_pairs(rng, 3, 24.0);
    let cfg = loc_config(&[LocLayer::Pixels], 8, 4);
    check(&[boxes_tensor(&pred)?], |t, v| {
        kd_loc_pixel_loss(v[0], &gt, t.constant(images.clone()), &[0, 1, 1], &cfg)
    })
}

fn detection(rng: &mut ChaCha8Rng) -> Result<f64> {
    let anchors = generate_anchors(32, 8, &[8.0, 16.0], &[1.0])?;
    let a = anchors.len();
    let classes = 3;
    let targets: Vec<Annotation> = (0..2)
        .map(|_| {
            let n = rng.random_range(1..3);
            Annotation {
                boxes: (0..n).map(|_| random_box(rng, 32.0, 6.0)).collect(),
                labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
            }
        })
        .collect();
    let assignments = targets
        .iter()
        .map(|t| assign_anchors(&anchors, &t.boxes, 0.5, 0.4))
        .collect::<Result<Vec<_>>>()?;
    let cfg = DetectionLossConfig::default();
    let mut worst = 0.0f64;
    for kind in [HeadKind::Categorical, HeadKind::Binary] {
        let d = if kind == HeadKind::Categorical {
            classes + 1
        } else {
            classes
        };
        let logits = uniform(rng, &[2, a, d], -2.0, 2.0);
        let offsets = uniform(rng, &[2, a, 4], -0.5, 0.5);
        let err = check(&[logits, offsets], |_, v| {
            let out = StudentOutput {
                logits: v[0],
                offsets: v[1],
            };
            Ok(detection_loss(&out, &anchors, &targets, &assignments, kind, &cfg)?.total)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn total(rng: &mut ChaCha8Rng) -> Result<f64> {
    let images = wavy(rng, 1, 24);
    let (pred, gt) = box_pairs(rng, 2, 24.0);
    let teacher_logits = uniform(rng, &[2, 3], -2.0, 2.0);
    let student_logits = uniform(rng, &[2, 4], -2.0, 2.0);
    let target = uniform(rng, &[2, 4], -1.0, 1.0);
    let cfg = DistillConfig {
        lambda_kc: rng.random_range(0.1..1.0),
        lambda_kl: rng.random_range(0.1..2.0),
        ..loc_config(&[LocLayer::Pixels], 8, 4)
    };
    check(&[student_logits, boxes_tensor(&pred)?], |t, v| {
        let det = v[0]
            .sub(t.constant(target.clone()))?
            .smooth_l1(0.5)?
            .sum()?;
        let kc = kd_cls_loss(
            v[0],
            t.constant(teacher_logits.clone()),
            HeadKind::Categorical,
            cfg.temperature,
        )?;
        let kl = kd_loc_pixel_loss(v[1], &gt, t.constant(images.clone()), &[0, 0], &cfg)?;
        total_loss(det, Some(kc), Some(kl), &cfg)
    })
}

/// `x²` whose backward claims `2.5·x`.
struct WrongSquare;

impl BackwardRule for WrongSquare {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_output: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            inputs[0]
                .data()
                .iter()
                .zip(grad_output)
                .map(|(x, g)| 2.5 * x * g)
                .collect(),
        )]
    }
}

fn corrupted_square(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = away_from_zero(rng, &[6]);
    check(&[x], |t, v| {
        let value = (*v[0].value()).clone().map(|x| x * x);
        t.custom(&[v[0]], value, WrongSquare).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_seeds() {
        for r in run_suite(7, 3, None, false).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn filter_selects_by_name() {
        let r = run_suite(0, 1, Some("kd_loc_pixel"), false).unwrap();
        assert_eq!(
            r.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
            ["kd_loc_pixel_loss"]
        );
        assert!(run_suite(0, 1, Some("no_such_op"), false)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn corrupted_rule_fails() {
        let r = run_suite(0, 2, Some(CORRUPTED), true).unwrap();
        assert_eq!(r.len(), 1);
        assert!(!r[0].passed && r[0].max_relative_error > 0.1, "{r:?}");
    }
}
