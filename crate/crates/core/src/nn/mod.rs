//! Small convolutional classifier with a maskable global-average-pooling
//! head.
//!
//! The network is a stack of 3x3 stride-2 convolution blocks with leaky ReLU,
//! one 3x3 same-padding convolution producing the final `C x S x S`
//! activations, an optional element-wise layer mask, global average pooling
//! and a two-way linear head. Backpropagation is written out by hand for this
//! fixed topology.

mod adadelta;
mod checkpoint;
mod linalg;
mod model;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::LayerMask;

pub use adadelta::{adadelta_step, adadelta_update, AdadeltaParams};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{
    activation_gradients, backward, cam_map, forward, init_model, loss, predict, predict_batch,
    ForwardRecord, Gradients, ModelState,
};

pub const CLASS_COUNT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn from_present(present: bool) -> Self {
        if present {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }
}

/// Network shape. The input side must equal `grid_side * 2^blocks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_side: usize,
    pub grid_side: usize,
    /// Output channels of each stride-2 block, first to last.
    pub block_channels: Vec<usize>,
    /// Channel count `C` of the final (maskable) convolution.
    pub head_channels: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_side: 56,
            grid_side: 7,
            block_channels: vec![8, 16, 32],
            head_channels: 32,
            leaky_slope: 0.1,
        }
    }
}

impl ArchConfig {
    /// The 14x14-grid variant on 112x112 inputs.
    pub fn grid14() -> Self {
        Self {
            input_side: 112,
            grid_side: 14,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 4 {
            return Err(Error::Config(format!(
                "grid side must be at least 4, got {}",
                self.grid_side
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if self.head_channels == 0 || self.block_channels.iter().any(|c| *c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let expected = self.grid_side << self.block_channels.len();
        if self.input_side != expected {
            return Err(Error::Config(format!(
                "input side {} does not downsample to a {}x{} grid through {} stride-2 blocks (needs {})",
                self.input_side,
                self.grid_side,
                self.grid_side,
                self.block_channels.len(),
                expected
            )));
        }
        Ok(())
    }

    pub fn grid_area(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn input_len(&self) -> usize {
        3 * self.input_side * self.input_side
    }
}

/// RGB image in `[0, 1]`, channel-major (`data[c * side * side + y * side + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    side: usize,
    data: Arc<[f32]>,
}

impl InputImage {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * side * side {
            return Err(Error::Usage(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                3 * side * side
            )));
        }
        Ok(Self {
            side,
            data: data.into(),
        })
    }

    /// Converts interleaved 8-bit RGB (`[y][x][c]`) into a channel-major image.
    pub fn from_rgb8(side: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != 3 * side * side {
            return Err(Error::Usage(format!(
                "rgb buffer has {} bytes, expected {}",
                pixels.len(),
                3 * side * side
            )));
        }
        let area = side * side;
        let mut data = vec![0f32; 3 * area];
        for (p, px) in pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * area + p] = px[c] as f32 / 255.0;
            }
        }
        Self::new(side, data)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: InputImage,
    pub label: Label,
    /// `None` is equivalent to an all-ones mask.
    pub mask: Option<Arc<LayerMask>>,
}

impl TrainingExample {
    pub fn new(image: InputImage, label: Label) -> Self {
        Self {
            image,
            label,
            mask: None,
        }
    }

    pub fn with_mask(image: InputImage, label: Label, mask: Arc<LayerMask>) -> Self {
        Self {
            image,
            label,
            mask: Some(mask),
        }
    }
}
