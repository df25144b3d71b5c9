//! Forward and backward kernels for the built-in tape operations.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Relu,
    Abs,
    Powf(f64),
    SmoothL1(f64),
    Sigmoid(f64),
    LogSigmoid(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    /// Backward routes to the first maximal element on ties.
    Max,
}

/// Numerically safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without cancellation for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.numel() == 1 {
        Ok(Broadcast::LeftScalar)
    } else if b.numel() == 1 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(shape_err!(
            "operands {:?} and {:?} are not broadcast-compatible",
            a.shape(),
            b.shape()
        ))
    }
}

fn apply(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    }
}

pub fn binary_forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (shape, data): (&[usize], Vec<f64>) = match broadcast(a, b)? {
        Broadcast::Same => (
            a.shape(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| apply(kind, x, y))
                .collect(),
        ),
        Broadcast::LeftScalar => {
            let s = a.data()[0];
            (
                b.shape(),
                b.data().iter().map(|&y| apply(kind, s, y)).collect(),
            )
        }
        Broadcast::RightScalar => {
            let s = b.data()[0];
            (
                a.shape(),
                a.data().iter().map(|&x| apply(kind, x, s)).collect(),
            )
        }
    };
    Tensor::new(shape, data)
}

pub fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mode = broadcast(a, b).expect("validated at forward time");
    let n = g.len();
    // Per-element partials of the output wrt each operand.
    let av = |i: usize| match mode {
        Broadcast::LeftScalar => a.data()[0],
        _ => a.data()[i],
    };
    let bv = |i: usize| match mode {
        Broadcast::RightScalar => b.data()[0],
        _ => b.data()[i],
    };
    let da_elem = |i: usize| match kind {
        BinaryKind::Add | BinaryKind::Sub => g[i],
        BinaryKind::Mul => g[i] * bv(i),
    };
    let db_elem = |i: usize| match kind {
        BinaryKind::Add => g[i],
        BinaryKind::Sub => -g[i],
        BinaryKind::Mul => g[i] * av(i),
    };
    let da = need_a.then(|| match mode {
        Broadcast::LeftScalar => vec![(0..n).map(da_elem).sum()],
        _ => (0..n).map(da_elem).collect(),
    });
    let db = need_b.then(|| match mode {
        Broadcast::RightScalar => vec![(0..n).map(db_elem).sum()],
        _ => (0..n).map(db_elem).collect(),
    });
    (da, db)
}

pub fn unary_forward(kind: UnaryKind, x: &Tensor) -> Result<Tensor> {
    if kind == UnaryKind::Ln {
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
    }
    if let UnaryKind::Powf(p) = kind {
        if p.fract() == 0.0 {
            // integer exponents are defined everywhere
        } else if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("powf of negative value {bad}")));
        }
    }
    let f = |v: f64| match kind {
        UnaryKind::Scale(c) => v * c,
        UnaryKind::AddScalar(c) => v + c,
        UnaryKind::Exp => v.exp(),
        UnaryKind::Ln => v.ln(),
        UnaryKind::Relu => {
            if v < 0.0 {
                0.0
            } else {
                v
            }
        }
        UnaryKind::Abs => v.abs(),
        UnaryKind::Powf(p) => v.powf(p),
        UnaryKind::SmoothL1(beta) => {
            let a = v.abs();
            if a < beta {
                0.5 * v * v / beta
            } else {
                a - 0.5 * beta
            }
        }
        UnaryKind::Sigmoid(t) => sigmoid(v / t),
        UnaryKind::LogSigmoid(t) => log_sigmoid(v / t),
    };
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())
}

pub fn unary_backward(kind: UnaryKind, x: &[f64], y: &[f64], g: &[f64], dst: &mut [f64]) {
    for i in 0..g.len() {
        let (v, out) = (x[i], y[i]);
        let d = match kind {
            UnaryKind::Scale(c) => c,
            UnaryKind::AddScalar(_) => 1.0,
            UnaryKind::Exp => out,
            UnaryKind::Ln => 1.0 / v,
            UnaryKind::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Abs => {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Powf(p) => {
                if p == 0.0 {
                    0.0
                } else if v == 0.0 {
                    if p == 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    p * v.powf(p - 1.0)
                }
            }
            UnaryKind::SmoothL1(beta) => {
                if v.abs() < beta {
                    v / beta
                } else {
                    v.signum()
                }
            }
            UnaryKind::Sigmoid(t) => out * (1.0 - out) / t,
            UnaryKind::LogSigmoid(t) => (1.0 - sigmoid(v / t)) / t,
        };
        dst[i] += g[i] * d;
    }
}

pub fn softmax_forward(x: &Tensor, t: f64, log: bool) -> Tensor {
    let cols = *x.shape().last().expect("rank checked by caller");
    let mut out = vec![0.0; x.numel()];
    for (row, dst) in x.data().chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v / t - max).exp();
            total += *d;
        }
        if log {
            let log_total = total.ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v / t - max - log_total;
            }
        } else {
            dst.iter_mut().for_each(|d| *d /= total);
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub fn softmax_backward(y: &[f64], g: &[f64], cols: usize, t: f64, log: bool, dst: &mut [f64]) {
    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dst.chunks_mut(cols)) {
        if log {
            let gsum: f64 = gr.iter().sum();
            for ((d, &ly), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d += (gv - ly.exp() * gsum) / t;
            }
        } else {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((d, &p), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d += p * (gv - dot) / t;
            }
        }
    }
}

/// For every input element, the flat index of the output element it reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &s)| s)
        .collect();
    let out_strides = Tensor::strides_of(&out_shape);
    let mut stride_for_dim = vec![0usize; shape.len()];
    let mut kept = out_strides.iter();
    for (d, slot) in stride_for_dim.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *slot = *kept.next().unwrap();
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += stride_for_dim[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= stride_for_dim[d] * shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

pub fn reduce_forward(
    x: &Tensor,
    axes: &[usize],
    mode: ReduceMode,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if let Some(&bad) = axes.iter().find(|&&a| a >= x.rank()) {
        return Err(shape_err!("axis {bad} invalid for shape {:?}", x.shape()));
    }
    let (out_shape, map) = reduce_map(x.shape(), &axes);
    let out_numel: usize = out_shape.iter().product();
    let count = x.numel() / out_numel;
    let mut out = vec![
        match mode {
            ReduceMode::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        out_numel
    ];
    let mut argmax = Vec::new();
    match mode {
        ReduceMode::Sum | ReduceMode::Mean => {
            for (&v, &o) in x.data().iter().zip(&map) {
                out[o] += v;
            }
            if mode == ReduceMode::Mean {
                out.iter_mut().for_each(|v| *v /= count as f64);
            }
        }
        ReduceMode::Max => {
            argmax = vec![usize::MAX; out_numel];
            for (i, (&v, &o)) in x.data().iter().zip(&map).enumerate() {
                if argmax[o] == usize::MAX || v > out[o] {
                    out[o] = v;
                    argmax[o] = i;
                }
            }
        }
    }
    Ok((Tensor::new(&out_shape, out)?, axes, argmax))
}

pub fn reduce_backward(
    shape: &[usize],
    axes: &[usize],
    mode: ReduceMode,
    argmax: &[usize],
    g: &[f64],
    dst: &mut [f64],
) {
    match mode {
        ReduceMode::Max => {
            for (o, &i) in argmax.iter().enumerate() {
                dst[i] += g[o];
            }
        }
        ReduceMode::Sum | ReduceMode::Mean => {
            let (_, map) = reduce_map(shape, axes);
            let scale = if mode == ReduceMode::Mean {
                1.0 / (map.len() / g.len()) as f64
            } else {
                1.0
            };
            for (d, &o) in dst.iter_mut().zip(&map) {
                *d += g[o] * scale;
            }
        }
    }
}

fn validate_perm(rank: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(shape_err!("permutation {perm:?} for rank {rank}"));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(shape_err!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// For every output element, the flat index of its source in the input.
fn permute_sources(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = Tensor::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut sources = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        sources.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, sources)
}

pub fn permute_forward(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    validate_perm(x.rank(), perm)?;
    let (out_shape, sources) = permute_sources(x.shape(), perm);
    Tensor::new(&out_shape, sources.iter().map(|&s| x.data()[s]).collect())
}

pub fn permute_backward(shape: &[usize], perm: &[usize], g: &[f64], dst: &mut [f64]) {
    let (_, sources) = permute_sources(shape, perm);
    for (&s, &gv) in sources.iter().zip(g) {
        dst[s] += gv;
    }
}

pub fn narrow_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(shape_err!(
            "narrow(axis={axis}, start={start}, len={len}) out of range for {:?}",
            x.shape()
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.shape()[axis] * inner;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

pub fn narrow_backward(
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    g: &[f64],
    dst: &mut [f64],
) {
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis] * inner;
    for (o, chunk) in g.chunks(len * inner).enumerate() {
        let base = o * full + start * inner;
        dst[base..base + len * inner]
            .iter_mut()
            .zip(chunk)
            .for_each(|(a, b)| *a += b);
    }
}

pub fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    if axis >= first.rank() {
        return Err(shape_err!(
            "concat axis {axis} for shape {:?}",
            first.shape()
        ));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let mut expect = first.shape().to_vec();
        expect[axis] = p.shape().get(axis).copied().unwrap_or(0);
        if p.shape() != expect.as_slice() {
            return Err(shape_err!(
                "concat mismatch: {:?} vs {:?} along axis {axis}",
                p.shape(),
                first.shape()
            ));
        }
        shape[axis] += p.shape()[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let width = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * width..(o + 1) * width]);
        }
    }
    Tensor::new(&shape, data)
}

pub fn index_select_forward(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if x.rank() == 0 || indices.is_empty() {
        return Err(shape_err!(
            "index_select needs rank ≥ 1 and at least one index"
        ));
    }
    let rows = x.shape()[0];
    let row: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        if i >= rows {
            return Err(shape_err!("index {i} out of range for {rows} rows"));
        }
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_branches_agree() {
        for &x in &[-30.0f64, -2.0, -1e-3, 0.0, 1e-3, 2.0, 30.0] {
            let direct: f64 = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - direct).abs() < 1e-15);
            assert!((log_sigmoid(x) - direct.ln()).abs() < 1e-12);
        }
        assert!(log_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn reduce_map_middle_axis() {
        let (shape, map) = reduce_map(&[2, 3, 2], &[1]);
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn permute_transposes() {
        let x = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let y = permute_forward(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(permute_forward(&x, &[0, 0]).is_err());
    }
}
