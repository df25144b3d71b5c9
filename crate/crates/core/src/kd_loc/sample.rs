//! Box-driven affine cropping with bilinear sampling, and adaptive average pooling.

use crate::bbox::BoundingBox;
use crate::diffmath::{linear_map, BackwardRule, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Row-major 2×3 matrix taking normalized output coordinates `(gx, gy, 1)`
/// to normalized input coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix(pub [f64; 6]);

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, gx: f64, gy: f64) -> (f64, f64) {
        let a = &self.0;
        (a[0] * gx + a[1] * gy + a[2], a[3] * gx + a[4] * gy + a[5])
    }
}

/// Crop transform of a box inside a `w × h` image.
pub fn box_to_affine(b: &BoundingBox, w: f64, h: f64) -> Result<AffineMatrix> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Domain(format!(
            "image size must be positive, got {w}×{h}"
        )));
    }
    if !(b.x1 < b.x2 && b.y1 < b.y2) {
        return Err(Error::DegenerateBox(format!("{b:?}")));
    }
    Ok(AffineMatrix([
        (b.x2 - b.x1) / w,
        0.0,
        -1.0 + (b.x1 + b.x2) / w,
        0.0,
        (b.y2 - b.y1) / h,
        -1.0 + (b.y1 + b.y2) / h,
    ]))
}

/// Differentiable [`box_to_affine`] over `[K, 4]` corner boxes, giving `[K, 6]`.
pub fn boxes_to_affine<'t>(boxes: Var<'t>, w: f64, h: f64) -> Result<Var<'t>> {
    let shape = boxes.shape();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(shape_err!("boxes must be [K, 4], got {shape:?}"));
    }
    for row in boxes.value().data().chunks(4) {
        box_to_affine(&BoundingBox::new(row[0], row[1], row[2], row[3]), w, h)?;
    }
    let (iw, ih) = (1.0 / w, 1.0 / h);
    #[rustfmt::skip]
    let m = Tensor::new(&[4, 6], vec![
        -iw, 0.0, iw, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0, -ih, ih,
        iw, 0.0, iw, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0, ih, ih,
    ])?;
    let bias = Tensor::new(&[6], vec![0.0, 0.0, -1.0, 0.0, 0.0, -1.0])?;
    let tape = boxes.tape();
    linear_map(boxes, tape.constant(m), tape.constant(bias))
}

/// Normalized coordinate of output cell `u` on an `s`-cell axis (cell centres).
pub fn grid_coord(u: usize, s: usize) -> f64 {
    -1.0 + (2 * u + 1) as f64 / s as f64
}

/// Bilinear read of an `h × w` plane at pixel coordinates `(px, py)`;
/// samples outside the plane read as 0.
///
/// Returns the value and its partial derivatives in `px` and `py`.
pub fn bilinear(plane: &[f64], h: usize, w: usize, px: f64, py: f64) -> (f64, f64, f64) {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let at = |y: f64, x: f64| {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1.0);
    let v10 = at(y0 + 1.0, x0);
    let v11 = at(y0 + 1.0, x0 + 1.0);
    let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    let dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    (v, dx, dy)
}

/// Pixel coordinate of a normalized coordinate on an axis of `n` pixels.
fn to_pixel(t: f64, n: usize) -> f64 {
    ((t + 1.0) * n as f64 - 1.0) / 2.0
}

struct CropRule {
    image_index: Vec<usize>,
    s: usize,
}

impl BackwardRule for CropRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (theta, image) = (inputs[0].data(), inputs[1]);
        let [_, c, h, w] = image.shape()[..] else {
            unreachable!()
        };
        let img = image.data();
        let s = self.s;
        let mut dtheta = needs[0].then(|| vec![0.0; theta.len()]);
        let mut dimg = needs[1].then(|| vec![0.0; img.len()]);
        for (k, &n) in self.image_index.iter().enumerate() {
            let a = AffineMatrix(theta[6 * k..6 * k + 6].try_into().unwrap());
            for i in 0..s {
                let gy = grid_coord(i, s);
                for j in 0..s {
                    let gx = grid_coord(j, s);
                    let (xn, yn) = a.apply(gx, gy);
                    let (px, py) = (to_pixel(xn, w), to_pixel(yn, h));
                    let (mut gpx, mut gpy) = (0.0, 0.0);
                    for ch in 0..c {
                        let go = g[((k * c + ch) * s + i) * s + j];
                        if go == 0.0 {
                            continue;
                        }
                        let base = (n * c + ch) * h * w;
                        if dtheta.is_some() {
                            let (_, dx, dy) = bilinear(&img[base..base + h * w], h, w, px, py);
                            gpx += go * dx;
                            gpy += go * dy;
                        }
                        if let Some(di) = dimg.as_mut() {
                            scatter_bilinear(&mut di[base..base + h * w], h, w, px, py, go);
                        }
                    }
                    if let Some(dt) = dtheta.as_mut() {
                        let (gxn, gyn) = (gpx * w as f64 / 2.0, gpy * h as f64 / 2.0);
                        let row = &mut dt[6 * k..6 * k + 6];
                        row[0] += gxn * gx;
                        row[1] += gxn * gy;
                        row[2] += gxn;
                        row[3] += gyn * gx;
                        row[4] += gyn * gy;
                        row[5] += gyn;
                    }
                }
            }
        }
        vec![dtheta, dimg]
    }
}

fn scatter_bilinear(plane: &mut [f64], h: usize, w: usize, px: f64, py: f64, g: f64) {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    for (y, x, wt) in corners {
        if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
            plane[y as usize * w + x as usize] += g * wt;
        }
    }
}

/// Samples an `s × s` crop per row of `theta: [K, 6]` from
/// `images: [N, C, H, W]`; row `k` reads image `image_index[k]`.
///
/// Output is `[K, C, s, s]`, differentiable in both `theta` and `images`.
pub fn spatial_transform_crop<'t>(
    theta: Var<'t>,
    images: Var<'t>,
    image_index: &[usize],
    s: usize,
) -> Result<Var<'t>> {
    if s < 2 {
        return Err(Error::Config(format!(
            "sampling size must be at least 2, got {s}"
        )));
    }
    let ts = theta.shape();
    if ts.len() != 2 || ts[1] != 6 || ts[0] != image_index.len() {
        return Err(shape_err!(
            "theta must be [{}, 6], got {ts:?}",
            image_index.len()
        ));
    }
    let img = images.value();
    let [n, c, h, w] = img.shape()[..] else {
        return Err(shape_err!(
            "images must be [N, C, H, W], got {:?}",
            img.shape()
        ));
    };
    if let Some(&bad) = image_index.iter().find(|&&i| i >= n) {
        return Err(shape_err!("image index {bad} out of range for {n} images"));
    }
    let t = theta.value();
    let data = img.data();
    let k = image_index.len();
    let mut out = Vec::with_capacity(k * c * s * s);
    for (row, &idx) in t.data().chunks(6).zip(image_index) {
        let a = AffineMatrix(row.try_into().unwrap());
        for ch in 0..c {
            let base = (idx * c + ch) * h * w;
            let plane = &data[base..base + h * w];
            for i in 0..s {
                for j in 0..s {
                    let (xn, yn) = a.apply(grid_coord(j, s), grid_coord(i, s));
                    out.push(bilinear(plane, h, w, to_pixel(xn, w), to_pixel(yn, h)).0);
                }
            }
        }
    }
    let value = Tensor::new(&[k, c, s, s], out)?;
    Ok(theta.tape().custom(
        &[theta, images],
        value,
        CropRule {
            image_index: image_index.to_vec(),
            s,
        },
    ))
}

/// Non-differentiable crop of one `[C, H, W]` image, resized to `s × s`
/// with the same sampler as [`spatial_transform_crop`].
pub fn crop_resize(
    image: &[f64],
    c: usize,
    h: usize,
    w: usize,
    b: &BoundingBox,
    s: usize,
) -> Result<Vec<f64>> {
    if image.len() != c * h * w {
        return Err(shape_err!(
            "image buffer has {} values, expected {}",
            image.len(),
            c * h * w
        ));
    }
    let a = box_to_affine(b, w as f64, h as f64)?;
    let mut out = Vec::with_capacity(c * s * s);
    for plane in image.chunks(h * w) {
        for i in 0..s {
            for j in 0..s {
                let (xn, yn) = a.apply(grid_coord(j, s), grid_coord(i, s));
                out.push(bilinear(plane, h, w, to_pixel(xn, w), to_pixel(yn, h)).0);
            }
        }
    }
    Ok(out)
}

/// `[start, end)` of output cell `i` when `n` inputs pool into `out` cells.
pub fn pool_window(i: usize, n: usize, out: usize) -> (usize, usize) {
    (i * n / out, ((i + 1) * n).div_ceil(out))
}

struct PoolRule {
    oh: usize,
    ow: usize,
}

impl BackwardRule for PoolRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let r = x.rank();
        let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
        let planes = x.numel() / (h * w);
        let mut dx = vec![0.0; x.numel()];
        for p in 0..planes {
            for i in 0..self.oh {
                let (r0, r1) = pool_window(i, h, self.oh);
                for j in 0..self.ow {
                    let (c0, c1) = pool_window(j, w, self.ow);
                    let share = g[(p * self.oh + i) * self.ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                    for y in r0..r1 {
                        for v in &mut dx[(p * h + y) * w + c0..(p * h + y) * w + c1] {
                            *v += share;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Averages the last two axes of `x` down to `out_h × out_w`; windows may overlap
/// when the sizes do not divide.
pub fn adaptive_avg_pool<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let r = shape.len();
    if r < 2 {
        return Err(shape_err!(
            "adaptive_avg_pool needs at least 2 axes, got {shape:?}"
        ));
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(shape_err!("cannot pool {h}×{w} to {out_h}×{out_w}"));
    }
    let value = x.value();
    let data = value.data();
    let planes = value.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        for i in 0..out_h {
            let (r0, r1) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = pool_window(j, w, out_w);
                let mut sum = 0.0;
                for y in r0..r1 {
                    sum += data[(p * h + y) * w + c0..(p * h + y) * w + c1]
                        .iter()
                        .sum::<f64>();
                }
                out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    let mut out_shape = shape[..r - 2].to_vec();
    out_shape.extend([out_h, out_w]);
    Ok(x.tape().custom(
        &[x],
        Tensor::new(&out_shape, out)?,
        PoolRule {
            oh: out_h,
            ow: out_w,
        },
    ))
}
