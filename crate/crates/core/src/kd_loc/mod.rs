//! Localization distillation.
//!
//! Predicted and ground-truth boxes are cropped out of the image with an
//! affine spatial transformer, optionally pushed through the frozen teacher,
//! pooled to a fixed size and compared with an L1 distance. Gradients reach
//! the predicted boxes through the bilinear sampler.

mod loss;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{kd_loc_feature_loss, kd_loc_loss, kd_loc_pixel_loss, usable_boxes, MIN_BOX_SIDE};
pub use sample::{
    adaptive_avg_pool, bilinear, box_to_affine, boxes_to_affine, crop_resize, grid_coord,
    pool_window, spatial_transform_crop, AffineMatrix,
};

/// Where regions are compared: raw pixels or one of the teacher's blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LocLayer {
    #[serde(rename = "l0")]
    Pixels,
    #[serde(rename = "l1")]
    Block1,
    #[serde(rename = "l2")]
    Block2,
}

impl LocLayer {
    pub fn as_str(self) -> &'static str {
        match self {
            LocLayer::Pixels => "l0",
            LocLayer::Block1 => "l1",
            LocLayer::Block2 => "l2",
        }
    }

    /// Teacher block index, `None` for raw pixels.
    pub fn block(self) -> Option<usize> {
        match self {
            LocLayer::Pixels => None,
            LocLayer::Block1 => Some(1),
            LocLayer::Block2 => Some(2),
        }
    }

    /// Spatial side of this layer's map for an `s × s` crop.
    pub fn side(self, s: usize) -> usize {
        let mut side = s;
        for _ in 0..self.block().unwrap_or(0) {
            side = (side - 1) / 2 + 1;
        }
        side
    }

    /// Parses a comma-separated list such as `l0,l1`.
    pub fn parse_list(s: &str) -> Result<Vec<LocLayer>> {
        let mut out: Vec<LocLayer> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl std::str::FromStr for LocLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l0" => Ok(LocLayer::Pixels),
            "l1" => Ok(LocLayer::Block1),
            "l2" => Ok(LocLayer::Block2),
            other => Err(Error::Config(format!(
                "unknown layer {other:?}, expected l0, l1 or l2"
            ))),
        }
    }
}

/// Weights and shape knobs of both distillation terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_kc: f64,
    pub lambda_kl: f64,
    pub temperature: f64,
    /// Side of the square crops.
    pub sampling_size: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    pub layers: Vec<LocLayer>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_kc: 0.4,
            lambda_kl: 1.0,
            temperature: 2.0,
            sampling_size: 32,
            pool_h: 4,
            pool_w: 4,
            layers: vec![LocLayer::Pixels, LocLayer::Block1],
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda_kc >= 0.0 && self.lambda_kl >= 0.0) {
            return bad(format!(
                "distillation weights must be ≥ 0, got {} and {}",
                self.lambda_kc, self.lambda_kl
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.sampling_size < 2 {
            return bad(format!(
                "sampling size must be at least 2, got {}",
                self.sampling_size
            ));
        }
        if self.pool_h == 0 || self.pool_w == 0 {
            return bad("pool size must be positive".into());
        }
        for &l in &self.layers {
            let side = l.side(self.sampling_size);
            if self.pool_h > side || self.pool_w > side {
                return bad(format!(
                    "pool {}×{} exceeds the {side}×{side} map of layer {}",
                    self.pool_h,
                    self.pool_w,
                    l.as_str()
                ));
            }
        }
        Ok(())
    }

    /// Teacher blocks among the configured layers.
    pub fn feature_layers(&self) -> Vec<LocLayer> {
        self.layers
            .iter()
            .copied()
            .filter(|l| l.block().is_some())
            .collect()
    }

    pub fn uses_pixels(&self) -> bool {
        self.layers.contains(&LocLayer::Pixels)
    }
}
