//! Shape scenes: coloured circles, squares and triangles on a noisy background.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{Annotation, BoundingBox};
use crate::error::{Error, Result};

/// Per-scene random source: ChaCha8 keyed by the dataset seed, one stream
/// per scene. Only integer draws and `u64 → f64` scaling are used, so the
/// output does not depend on the platform's math library.
pub struct SceneRng(ChaCha8Rng);

impl SceneRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Integer in `0..n` by multiply-shift.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.0.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Integer in `lo..=hi`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below((hi - lo + 1) as u64) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the point `(x, y)` lies inside the shape inscribed in `b`.
    pub fn contains(self, b: &BoundingBox, x: f64, y: f64) -> bool {
        if x < b.x1 || x > b.x2 || y < b.y1 || y > b.y2 {
            return false;
        }
        let (cx, cy) = b.center();
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            // Apex at the top centre, base along the bottom edge.
            Shape::Triangle => (x - cx).abs() * b.height() <= (y - b.y1) * b.width() / 2.0,
        }
    }
}

/// Named RGB colours; class `c` uses shape `c % 3` and colour `c / 3`.
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.90, 0.20, 0.15]),
    ("blue", [0.15, 0.45, 0.95]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("green", [0.20, 0.80, 0.30]),
    ("magenta", [0.85, 0.25, 0.85]),
    ("cyan", [0.10, 0.85, 0.85]),
];

pub const MAX_CLASSES: usize = 3 * PALETTE.len();

pub fn class_shape(class: usize) -> Shape {
    Shape::ALL[class % 3]
}

pub fn class_color(class: usize) -> [f64; 3] {
    PALETTE[class / 3].1
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| format!("{}-{}", PALETTE[c / 3].0, class_shape(c).name()))
        .collect()
}

/// Scene generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Placements overlapping an earlier object by more than this IoU are retried.
    pub max_iou: f64,
    pub max_retries: usize,
    pub min_area: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: 6,
            min_objects: 1,
            max_objects: 4,
            min_size: 10,
            max_size: 28,
            max_iou: 0.3,
            max_retries: 100,
            min_area: 16.0,
            noise: 0.06,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return bad(format!(
                "classes must be in 2..={MAX_CLASSES}, got {}",
                self.classes
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "bad object count range {}..={}",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > self.image_size {
            return bad(format!(
                "bad size range {}..={} for {} px images",
                self.min_size, self.max_size, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.max_iou) || !(0.0..0.5).contains(&self.noise) {
            return bad("max_iou must be in [0, 1] and noise in [0, 0.5)".into());
        }
        Ok(())
    }
}

/// One rendered scene; `pixels` is `[3, S, S]` row-major in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub pixels: Vec<f32>,
    pub annotation: Annotation,
}

fn place_box(rng: &mut SceneRng, spec: &SceneSpec) -> BoundingBox {
    let w = rng.between(spec.min_size, spec.max_size);
    // Aspect within roughly 4:5 either way.
    let lo = (w * 4 / 5).max(spec.min_size);
    let hi = (w * 5 / 4).min(spec.max_size);
    let h = rng.between(lo, hi);
    let x = rng.between(0, spec.image_size - w);
    let y = rng.between(0, spec.image_size - h);
    BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
}

/// Renders a scene from its own random stream.
pub fn generate_scene(rng: &mut SceneRng, spec: &SceneSpec) -> Scene {
    let s = spec.image_size;
    let want = rng.between(spec.min_objects, spec.max_objects);
    let mut annotation = Annotation::default();
    let mut colors = Vec::new();
    let mut retries = 0;
    while annotation.len() < want && retries <= spec.max_retries {
        let b = place_box(rng, spec);
        if b.area() < spec.min_area || annotation.boxes.iter().any(|o| o.iou(&b) > spec.max_iou) {
            retries += 1;
            continue;
        }
        let label = rng.below(spec.classes as u64) as usize;
        let base = class_color(label);
        let jitter: Vec<f64> = (0..3).map(|_| rng.uniform(-0.06, 0.06)).collect();
        colors.push([
            base[0] + jitter[0],
            base[1] + jitter[1],
            base[2] + jitter[2],
        ]);
        annotation.boxes.push(b);
        annotation.labels.push(label);
    }

    let gray = rng.uniform(0.35, 0.6);
    let tint: Vec<f64> = (0..3).map(|_| gray + rng.uniform(-0.05, 0.05)).collect();
    let mut pixels = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = [tint[0], tint[1], tint[2]];
            for ((b, &l), c) in annotation.boxes.iter().zip(&annotation.labels).zip(&colors) {
                if class_shape(l).contains(b, cx, cy) {
                    color = *c;
                }
            }
            for (ch, v) in color.iter().enumerate() {
                let noisy = v + spec.noise * (2.0 * rng.unit() - 1.0);
                pixels[(ch * s + y) * s + x] = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Scene { pixels, annotation }
}

/// Pixels covered by a single object rendered alone, as an `S × S` mask.
pub fn object_mask(shape: Shape, b: &BoundingBox, size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| shape.contains(b, (i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_scene(&mut SceneRng::new(7, 3), &spec);
        let b = generate_scene(&mut SceneRng::new(7, 3), &spec);
        assert_eq!(a, b);
        let c = generate_scene(&mut SceneRng::new(7, 4), &spec);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn object_counts_stay_in_range() {
        let spec = SceneSpec::default();
        for stream in 0..1000 {
            let scene = generate_scene(&mut SceneRng::new(1, stream), &spec);
            let n = scene.annotation.len();
            assert!((1..=4).contains(&n), "stream {stream}: {n} objects");
            for (i, a) in scene.annotation.boxes.iter().enumerate() {
                assert!(a.x1 >= 0.0 && a.y1 >= 0.0 && a.x2 <= 64.0 && a.y2 <= 64.0);
                assert!(a.area() >= 16.0);
                for b in &scene.annotation.boxes[..i] {
                    assert!(a.iou(b) <= 0.3);
                }
            }
            assert!(scene.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn boxes_tightly_bound_their_shapes() {
        let spec = SceneSpec::default();
        for stream in 0..200 {
            let scene = generate_scene(&mut SceneRng::new(2, stream), &spec);
            for (b, l) in scene.annotation.iter() {
                let mask = object_mask(class_shape(l), b, 64);
                let on: Vec<(f64, f64)> = (0..64 * 64)
                    .filter(|&i| mask[i])
                    .map(|i| ((i % 64) as f64, (i / 64) as f64))
                    .collect();
                assert!(!on.is_empty());
                let min_x = on.iter().map(|p| p.0).fold(f64::MAX, f64::min);
                let max_x = on.iter().map(|p| p.0 + 1.0).fold(f64::MIN, f64::max);
                let min_y = on.iter().map(|p| p.1).fold(f64::MAX, f64::min);
                let max_y = on.iter().map(|p| p.1 + 1.0).fold(f64::MIN, f64::max);
                assert!(min_x >= b.x1 && max_x <= b.x2 && min_y >= b.y1 && max_y <= b.y2);
                for (edge, got) in [(b.x1, min_x), (b.x2, max_x), (b.y1, min_y), (b.y2, max_y)] {
                    assert!(
                        (edge - got).abs() <= 1.0,
                        "{:?} {l}: edge {edge} vs {got}",
                        b
                    );
                }
            }
        }
    }

    #[test]
    fn unit_draws_are_in_range() {
        let mut rng = SceneRng::new(0, 0);
        for _ in 0..10_000 {
            let u = rng.unit();
            assert!((0.0..1.0).contains(&u));
            assert!(rng.between(3, 5) <= 5);
        }
    }

    #[test]
    fn class_names_combine_color_and_shape() {
        assert_eq!(
            class_names(4),
            vec!["red-circle", "red-square", "red-triangle", "blue-circle"]
        );
        assert!(SceneSpec {
            classes: 1,
            ..SceneSpec::default()
        }
        .validate()
        .is_err());
    }
}
