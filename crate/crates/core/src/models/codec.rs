use crate::bbox::BoundingBox;
use crate::diffmath::{BackwardRule, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Log-scale offsets are clamped to this magnitude before `exp`.
pub const MAX_LOG_SCALE: f64 = 4.0;

/// Offsets `(tx, ty, tw, th)` that move `anchor` onto `target`.
pub fn encode(anchor: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gcx, gcy) = target.center();
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`], with the log-scale terms clamped.
pub fn decode(anchor: &BoundingBox, t: &[f64]) -> BoundingBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let w = aw * t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BoundingBox::from_center(acx + t[0] * aw, acy + t[1] * ah, w, h)
}

struct DecodeRule {
    anchors: Vec<BoundingBox>,
}

impl BackwardRule for DecodeRule {
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
        let t = inputs[0].data();
        let mut dt = vec![0.0; t.len()];
        for (r, a) in self.anchors.iter().enumerate() {
            let (aw, ah) = (a.width(), a.height());
            let (g1, g2, g3, g4) = (g[4 * r], g[4 * r + 1], g[4 * r + 2], g[4 * r + 3]);
            // x1 = cx - w/2, x2 = cx + w/2 with d cx/d tx = aw, d w/d tw = w.
            dt[4 * r] = aw * (g1 + g3);
            dt[4 * r + 1] = ah * (g2 + g4);
            let tw = t[4 * r + 2];
            if tw.abs() < MAX_LOG_SCALE {
                dt[4 * r + 2] = aw * tw.exp() * 0.5 * (g3 - g1);
            }
            let th = t[4 * r + 3];
            if th.abs() < MAX_LOG_SCALE {
                dt[4 * r + 3] = ah * th.exp() * 0.5 * (g4 - g2);
            }
        }
        vec![Some(dt)]
    }
}

/// Differentiable decoding of `offsets: [M, 4]` against `M` anchors into
/// corner boxes `[M, 4]` laid out as `(x1, y1, x2, y2)`.
pub fn decode_boxes<'t>(anchors: &[BoundingBox], offsets: Var<'t>) -> Result<Var<'t>> {
    let shape = offsets.shape();
    if shape.len() != 2 || shape[1] != 4 || shape[0] != anchors.len() {
        return Err(shape_err!(
            "decode_boxes needs [{}, 4] offsets, got {shape:?}",
            anchors.len()
        ));
    }
    let t = offsets.value();
    if !t.is_finite() {
        return Err(Error::Numerical("non-finite box offsets".into()));
    }
    let mut out = Vec::with_capacity(t.numel());
    for (a, row) in anchors.iter().zip(t.data().chunks(4)) {
        out.extend(decode(a, row).to_array());
    }
    let value = Tensor::new(&shape, out)?;
    Ok(offsets.tape().custom(
        &[offsets],
        value,
        DecodeRule {
            anchors: anchors.to_vec(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchors() -> Vec<BoundingBox> {
        vec![
            BoundingBox::from_center(8.0, 8.0, 12.0, 12.0),
            BoundingBox::from_center(40.0, 24.0, 24.0, 24.0),
            BoundingBox::from_center(30.0, 50.0, 16.0, 8.0),
        ]
    }

    #[test]
    fn zero_offsets_return_anchors() {
        let tape = Tape::new();
        let a = anchors();
        let boxes = decode_boxes(&a, tape.constant(Tensor::zeros(&[3, 4])))
            .unwrap()
            .value();
        for (row, anchor) in boxes.data().chunks(4).zip(&a) {
            assert_eq!(row, &anchor.to_array());
        }
    }

    #[test]
    fn log_two_doubles_width() {
        let a = anchors()[1];
        let b = decode(&a, &[0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((b.width() - 2.0 * a.width()).abs() < 1e-12);
        assert_eq!(b.center(), a.center());
        assert_eq!(b.height(), a.height());
    }

    #[test]
    fn encode_inverts_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for a in anchors() {
            for _ in 0..50 {
                let t: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                let back = encode(&a, &decode(&a, &t));
                for i in 0..4 {
                    assert!((back[i] - t[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn clamping_bounds_the_scale() {
        let a = anchors()[0];
        let b = decode(&a, &[0.0, 0.0, 50.0, -50.0]);
        assert!((b.width() - a.width() * 4f64.exp()).abs() < 1e-9);
        assert!((b.height() - a.height() * (-4f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        let a = anchors();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.5..1.5));
            let err = grad_check(
                |tape, v| {
                    let b = decode_boxes(&a, v)?;
                    let w = tape.constant(Tensor::from_fn(&[3, 4], |i| 0.3 * i as f64 - 1.0));
                    b.mul(w)?.powf(2.0)?.sum()?.scale(1e-3)
                },
                &t,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
