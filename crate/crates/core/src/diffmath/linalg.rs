//! Dense matrix products and im2col convolution.

use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// `C[m,n] = A[m,k]·B[k,n] + beta·C`, all row-major. `a_t`/`b_t` mean the
/// operand is stored transposed (`A` as `[k,m]`, `B` as `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(shape_err!(
            "linear_map expects x[N,I], w[I,O], b[O]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let (wi, o) = (w.shape()[0], w.shape()[1]);
    if i != wi || b.shape()[0] != o {
        return Err(shape_err!(
            "linear_map inner dimensions disagree: {:?}·{:?} + {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    gemm(n, i, o, x.data(), false, w.data(), false, &mut out, 1.0);
    Tensor::new(&[n, o], out)
}

#[derive(Clone, Debug)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(shape_err!(
                "conv2d expects x[N,C,H,W], k[F,C,kh,kw]; got {x:?}, {k:?}"
            ));
        }
        if x[1] != k[1] {
            return Err(shape_err!(
                "conv2d channel mismatch: input {x:?}, kernel {k:?}"
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be ≥ 1"));
        }
        let (ph, pw) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if k[2] > ph || k[3] > pw {
            return Err(shape_err!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                k[2],
                k[3]
            ));
        }
        Ok(Self {
            batch: x[0],
            channels: x[1],
            in_h: x[2],
            in_w: x[3],
            filters: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
            out_h: (ph - k[2]) / stride + 1,
            out_w: (pw - k[3]) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(row, col, src)` for every in-bounds (patch row, output position, input offset).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.in_h as isize, self.in_w as isize);
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let src = (c * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(row, oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let plane = self.plane();
        self.for_each_tap(|row, col, src| cols[row * plane + col] = image[src]);
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let plane = self.plane();
        self.for_each_tap(|row, col, src| image[src] += cols[row * plane + col]);
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Tensor {
    let (patch, plane) = (g.patch(), g.plane());
    let in_size = g.channels * g.in_h * g.in_w;
    let out_size = g.filters * plane;
    let mut out = vec![0.0; g.batch * out_size];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        g.im2col(&x[n * in_size..(n + 1) * in_size], &mut cols);
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = bias {
            for (f, row) in dst.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = b[f]);
            }
        }
        gemm(g.filters, patch, plane, k, false, &cols, false, dst, 1.0);
    }
    Tensor::new(&[g.batch, g.filters, g.out_h, g.out_w], out).expect("geometry consistent")
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (patch, plane) = (g.patch(), g.plane());
    let in_size = g.channels * g.in_h * g.in_w;
    let out_size = g.filters * plane;
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        let go = &grad_out[n * out_size..(n + 1) * out_size];
        if let Some(dk) = dk.as_deref_mut() {
            g.im2col(&x[n * in_size..(n + 1) * in_size], &mut cols);
            // dK[F,P] += dOut[F,HW] · cols[P,HW]^T
            gemm(g.filters, plane, patch, go, false, &cols, true, dk, 1.0);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[P,HW] = K[F,P]^T · dOut[F,HW]
            gemm(patch, g.filters, plane, k, true, go, false, &mut cols, 0.0);
            g.col2im(&cols, &mut dx[n * in_size..(n + 1) * in_size]);
        }
    }
}
