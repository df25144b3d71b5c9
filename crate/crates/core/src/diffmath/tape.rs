//! Eager evaluation with a recording tape.
//!
//! Every operation computes its value immediately and appends a node to the
//! [`Tape`]. Nodes only ever reference earlier nodes, so the tape is always in
//! topological order and a reverse sweep is enough to run the chain rule.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::linalg;
use super::ops::{self, BinaryKind, ReduceMode, UnaryKind};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Backward rule for operations defined outside this module.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries returned for
/// inputs that do not need one are ignored.
pub trait BackwardRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Softmax {
        x: usize,
        temperature: f64,
        log: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Reduce {
        x: usize,
        axes: Vec<usize>,
        mode: ReduceMode,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    IndexSelect {
        x: usize,
        indices: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input: backward passes produce a gradient for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        self.push_rc(Rc::new(value), requires_grad, op)
    }

    fn push_rc(&self, value: Rc<Tensor>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an operation whose backward rule lives outside this module.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        rule: impl BackwardRule + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| self.requires_grad(i));
        self.push(
            output,
            requires_grad,
            Op::Custom {
                inputs: ids,
                rule: Box::new(rule),
            },
        )
    }

    /// Runs the chain rule from the scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut grads = Gradients::default();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Tape::backward`] but adds into existing leaf gradients.
    pub fn backward_into(&self, loss: Var<'_>, grads: &mut Gradients) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(shape_err!("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        if grads.slots.len() < nodes.len() {
            grads.slots.resize_with(nodes.len(), || None);
        }
        let mut work: Vec<Option<Vec<f64>>> = Vec::new();
        work.resize_with(loss.id + 1, || None);
        work[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut grads.slots[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            backward_node(&nodes, id, &g, &mut work);
        }
        Ok(())
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn slot<'w>(work: &'w mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> &'w mut Vec<f64> {
    work[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
}

fn accumulate(work: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: &[f64]) {
    let dst = slot(work, nodes, id);
    dst.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (da, db) =
                ops::binary_backward(*kind, va, vb, g, needs(nodes, *a), needs(nodes, *b));
            if let Some(d) = da {
                accumulate(work, nodes, *a, &d);
            }
            if let Some(d) = db {
                accumulate(work, nodes, *b, &d);
            }
        }
        Op::Unary { kind, x } => {
            if needs(nodes, *x) {
                let vx = &nodes[*x].value;
                let dst = slot(work, nodes, *x);
                ops::unary_backward(*kind, vx.data(), out.data(), g, dst);
            }
        }
        Op::Softmax {
            x,
            temperature,
            log,
        } => {
            if needs(nodes, *x) {
                let cols = *out.shape().last().unwrap_or(&1);
                let dst = slot(work, nodes, *x);
                ops::softmax_backward(out.data(), g, cols, *temperature, *log, dst);
            }
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let (n, i) = (vx.shape()[0], vx.shape()[1]);
            let o = vw.shape()[1];
            if needs(nodes, *x) {
                let dst = slot(work, nodes, *x);
                linalg::gemm(n, o, i, g, false, vw.data(), true, dst, 1.0);
            }
            if needs(nodes, *w) {
                let dst = slot(work, nodes, *w);
                linalg::gemm(i, n, o, vx.data(), true, g, false, dst, 1.0);
            }
            if needs(nodes, *b) {
                let dst = slot(work, nodes, *b);
                for row in g.chunks(o) {
                    dst.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::Conv2d {
            x,
            k,
            bias,
            stride,
            pad,
        } => {
            let geom = linalg::ConvGeometry::new(
                nodes[*x].value.shape(),
                nodes[*k].value.shape(),
                *stride,
                *pad,
            )
            .expect("validated at forward time");
            let mut dx = needs(nodes, *x).then(|| vec![0.0; nodes[*x].value.numel()]);
            let mut dk = needs(nodes, *k).then(|| vec![0.0; nodes[*k].value.numel()]);
            linalg::conv2d_backward(
                &geom,
                nodes[*x].value.data(),
                nodes[*k].value.data(),
                g,
                dx.as_deref_mut(),
                dk.as_deref_mut(),
            );
            if let Some(d) = dx {
                accumulate(work, nodes, *x, &d);
            }
            if let Some(d) = dk {
                accumulate(work, nodes, *k, &d);
            }
            if let Some(b) = bias {
                if needs(nodes, *b) {
                    let plane = geom.out_h * geom.out_w;
                    let dst = slot(work, nodes, *b);
                    for (idx, chunk) in g.chunks(plane).enumerate() {
                        dst[idx % geom.filters] += chunk.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Reduce {
            x,
            axes,
            mode,
            argmax,
        } => {
            if needs(nodes, *x) {
                let shape = nodes[*x].value.shape().to_vec();
                let dst = slot(work, nodes, *x);
                ops::reduce_backward(&shape, axes, *mode, argmax, g, dst);
            }
        }
        Op::Reshape { x } => {
            if needs(nodes, *x) {
                accumulate(work, nodes, *x, g);
            }
        }
        Op::Permute { x, perm } => {
            if needs(nodes, *x) {
                let shape = nodes[*x].value.shape().to_vec();
                let dst = slot(work, nodes, *x);
                ops::permute_backward(&shape, perm, g, dst);
            }
        }
        Op::Narrow { x, axis, start } => {
            if needs(nodes, *x) {
                let shape = nodes[*x].value.shape().to_vec();
                let len = out.shape()[*axis];
                let dst = slot(work, nodes, *x);
                ops::narrow_backward(&shape, *axis, *start, len, g, dst);
            }
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let width = nodes[inp].value.shape()[*axis] * inner;
                if needs(nodes, inp) {
                    let dst = slot(work, nodes, inp);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        dst[o * width..(o + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += width;
            }
        }
        Op::IndexSelect { x, indices } => {
            if needs(nodes, *x) {
                let row: usize = nodes[*x].value.shape()[1..].iter().product();
                let dst = slot(work, nodes, *x);
                for (r, &src) in indices.iter().enumerate() {
                    dst[src * row..(src + 1) * row]
                        .iter_mut()
                        .zip(&g[r * row..(r + 1) * row])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Custom { inputs, rule } => {
            let values: Vec<&Tensor> = inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let need: Vec<bool> = inputs.iter().map(|&i| needs(nodes, i)).collect();
            let grads = rule.backward(&values, out, g, &need);
            for ((&inp, grad), need) in inputs.iter().zip(grads).zip(need) {
                if let (Some(d), true) = (grad, need) {
                    accumulate(work, nodes, inp, &d);
                }
            }
        }
    }
}

/// Leaf gradients produced by a backward pass.
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `var`, if it is a trainable leaf that the loss depends on.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.slots.get(var.id).and_then(|s| s.as_deref())
    }

    /// Gradient of `var` as a tensor; zeros when the loss does not reach it.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.get(var) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("gradient matches leaf shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push_rc(self.value(), false, Op::Leaf)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(shape_err!("operands recorded on different tapes"))
        }
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = ops::binary_forward(kind, &self.value(), &other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        ))
    }

    fn unary(&self, kind: UnaryKind) -> Result<Var<'t>> {
        let value = ops::unary_forward(kind, &self.value())?;
        Ok(self
            .tape
            .push(value, self.requires_grad(), Op::Unary { kind, x: self.id }))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Scale(factor))
    }

    pub fn add_scalar(&self, offset: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::AddScalar(offset))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; errors on non-positive entries.
    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Ln)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Abs)
    }

    /// `x^p`; negative `x` is allowed only for integer `p`.
    pub fn powf(&self, p: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Powf(p))
    }

    pub fn smooth_l1(&self, beta: f64) -> Result<Var<'t>> {
        if beta <= 0.0 {
            return Err(Error::Domain(format!(
                "smooth_l1 beta must be > 0, got {beta}"
            )));
        }
        self.unary(UnaryKind::SmoothL1(beta))
    }

    /// Elementwise `(1 + exp(-x/T))^-1`.
    pub fn sigmoid_t(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        self.unary(UnaryKind::Sigmoid(temperature))
    }

    /// Elementwise `log sigmoid(x/T)`, evaluated without forming the sigmoid.
    pub fn log_sigmoid_t(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        self.unary(UnaryKind::LogSigmoid(temperature))
    }

    /// Softmax of `x/T` along the last axis.
    pub fn softmax_t(&self, temperature: f64) -> Result<Var<'t>> {
        self.softmax_impl(temperature, false)
    }

    /// Log-softmax of `x/T` along the last axis.
    pub fn log_softmax_t(&self, temperature: f64) -> Result<Var<'t>> {
        self.softmax_impl(temperature, true)
    }

    fn softmax_impl(&self, temperature: f64, log: bool) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let x = self.value();
        if x.rank() == 0 {
            return Err(shape_err!("softmax needs at least one axis"));
        }
        let value = ops::softmax_forward(&x, temperature, log);
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::Softmax {
                x: self.id,
                temperature,
                log,
            },
        ))
    }

    pub fn reduce(&self, axes: &[usize], mode: ReduceMode) -> Result<Var<'t>> {
        let x = self.value();
        let (value, axes, argmax) = ops::reduce_forward(&x, axes, mode)?;
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::Reduce {
                x: self.id,
                axes,
                mode,
                argmax,
            },
        ))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&all, ReduceMode::Sum)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&all, ReduceMode::Mean)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self
            .tape
            .push(value, self.requires_grad(), Op::Reshape { x: self.id }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = ops::permute_forward(&self.value(), perm)?;
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = ops::narrow_forward(&self.value(), axis, start, len)?;
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Rows of the leading axis, in the order given (repeats allowed).
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'t>> {
        let value = ops::index_select_forward(&self.value(), indices)?;
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::IndexSelect {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?;
    for p in parts {
        first.same_tape(p)?;
    }
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let value = ops::concat_forward(&refs, axis)?;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(first.tape.push(
        value,
        rg,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    ))
}

/// `y = x·w + b` for `x: [N, I]`, `w: [I, O]`, `b: [O]`.
pub fn linear_map<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.same_tape(&w)?;
    x.same_tape(&b)?;
    let (vx, vw, vb) = (x.value(), w.value(), b.value());
    let value = linalg::linear_forward(&vx, &vw, &vb)?;
    let rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
    Ok(x.tape.push(
        value,
        rg,
        Op::Linear {
            x: x.id,
            w: w.id,
            b: b.id,
        },
    ))
}

/// 2-D cross-correlation with zero padding; `x: [N,C,H,W]`, `k: [F,C,kh,kw]`,
/// optional per-filter `bias: [F]`.
pub fn conv2d<'t>(
    x: Var<'t>,
    k: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    x.same_tape(&k)?;
    let (vx, vk) = (x.value(), k.value());
    let geom = linalg::ConvGeometry::new(vx.shape(), vk.shape(), stride, pad)?;
    let vb = match &bias {
        Some(b) => {
            x.same_tape(b)?;
            let vb = b.value();
            if vb.shape() != [geom.filters] {
                return Err(shape_err!(
                    "conv bias shape {:?}, expected [{}]",
                    vb.shape(),
                    geom.filters
                ));
            }
            Some(vb)
        }
        None => None,
    };
    let value =
        linalg::conv2d_forward(&geom, vx.data(), vk.data(), vb.as_deref().map(|t| t.data()));
    let rg = x.requires_grad() || k.requires_grad() || bias.is_some_and(|b| b.requires_grad());
    Ok(x.tape.push(
        value,
        rg,
        Op::Conv2d {
            x: x.id,
            k: k.id,
            bias: bias.map(|b| b.id),
            stride,
            pad,
        },
    ))
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be > 0, got {t}")))
    }
}
