use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{he_normal, ParamStore};
use crate::diffmath::{conv2d, linear_map, ReduceMode, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Two stride-2 convolution blocks, global average pooling and a linear
/// classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherArch {
    pub input_size: usize,
    pub classes: usize,
    pub channels: [usize; 2],
}

impl TeacherArch {
    pub fn new(input_size: usize, classes: usize) -> Self {
        Self {
            input_size,
            classes,
            channels: [16, 32],
        }
    }

    /// `[M, H, W]` of the block outputs for an `s×s` input.
    pub fn feature_shape(&self, block: usize, s: usize) -> [usize; 3] {
        let mut side = s;
        for _ in 0..block {
            side = (side - 1) / 2 + 1;
        }
        [self.channels[block - 1], side, side]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub arch: TeacherArch,
    pub params: ParamStore,
}

/// Logits plus the outputs of the convolution blocks that were computed.
#[derive(Clone, Debug)]
pub struct TeacherOutput<'t> {
    pub logits: Var<'t>,
    /// `features[0]` is the first block, `features[1]` the second.
    pub features: Vec<Var<'t>>,
}

impl Teacher {
    pub fn new(arch: TeacherArch, rng: &mut impl Rng) -> Result<Self> {
        if arch.classes < 2 || arch.input_size < 4 {
            return Err(Error::Config(format!(
                "invalid teacher architecture {arch:?}"
            )));
        }
        let [c1, c2] = arch.channels;
        let mut params = ParamStore::new();
        params.push("l1.weight", he_normal(rng, &[c1, 3, 3, 3], 27));
        params.push("l1.bias", Tensor::zeros(&[c1]));
        params.push("l2.weight", he_normal(rng, &[c2, c1, 3, 3], 9 * c1));
        params.push("l2.bias", Tensor::zeros(&[c2]));
        params.push(
            "fc.weight",
            he_normal(rng, &[c2, arch.classes], c2).map(|v| v * 0.5),
        );
        params.push("fc.bias", Tensor::zeros(&[arch.classes]));
        Ok(Self { arch, params })
    }

    /// Block outputs up to and including block `depth` (1 or 2); any input size.
    pub fn feature_maps<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        depth: usize,
    ) -> Result<Vec<Var<'t>>> {
        if !(1..=2).contains(&depth) {
            return Err(shape_err!(
                "teacher has blocks 1 and 2, asked for depth {depth}"
            ));
        }
        if p.len() != self.params.len() {
            return Err(shape_err!(
                "teacher expects {} parameters, got {}",
                self.params.len(),
                p.len()
            ));
        }
        let mut out = Vec::with_capacity(depth);
        let h1 = conv2d(x, p[0], Some(p[1]), 2, 1)?.relu()?;
        out.push(h1);
        if depth == 2 {
            out.push(conv2d(h1, p[2], Some(p[3]), 2, 1)?.relu()?);
        }
        Ok(out)
    }

    /// Full forward pass on `[N, 3, S, S]` images with `S` the input size.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<TeacherOutput<'t>> {
        let s = self.arch.input_size;
        match x.shape()[..] {
            [_, 3, h, w] if h == s && w == s => {}
            ref other => {
                return Err(shape_err!(
                    "teacher expects [N, 3, {s}, {s}] input, got {other:?}"
                ))
            }
        }
        let features = self.feature_maps(p, x, 2)?;
        let pooled = features[1].reduce(&[2, 3], ReduceMode::Mean)?;
        let logits = linear_map(pooled, p[4], p[5])?;
        Ok(TeacherOutput { logits, features })
    }
}
