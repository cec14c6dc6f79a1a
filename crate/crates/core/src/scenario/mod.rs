//! Synthetic time-ordered scenarios and their on-disk form.
//!
//! A scenario is an ordered training stream of annotated frames plus a
//! balanced, unordered test set drawn from the same world.

mod generate;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{InputImage, Label};
use crate::tracker::GrayImage;

pub use generate::{generate_scenario, GenParams};
pub use io::{load_scenario, save_scenario, FORMAT_VERSION};

/// An RGB8 frame, interleaved `[y][x][c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(index: usize, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Usage(format!(
                "frame {index}: {} bytes for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            index,
            width,
            height,
            pixels,
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_rgb8(self.width, self.height, &self.pixels)
    }

    /// Box-filtered copy at `side x side` for the classifier. The frame must
    /// be square with a side that is a multiple of `side`.
    pub fn to_input(&self, side: usize) -> Result<InputImage> {
        if side == 0 || self.width != self.height || self.width % side != 0 {
            return Err(Error::Config(format!(
                "cannot resize a {}x{} frame to {side}x{side}",
                self.width, self.height
            )));
        }
        let k = self.width / side;
        let area = side * side;
        let norm = 1.0 / (255.0 * (k * k) as f32);
        let mut data = vec![0f32; 3 * area];
        for y in 0..side {
            for x in 0..side {
                let mut acc = [0u32; 3];
                for dy in 0..k {
                    let row = (y * k + dy) * self.width;
                    for dx in 0..k {
                        let p = &self.pixels[3 * (row + x * k + dx)..][..3];
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                    }
                }
                for c in 0..3 {
                    data[c * area + y * side + x] = acc[c] as f32 * norm;
                }
            }
        }
        InputImage::new(side, data)
    }
}

/// Ground truth for one frame. `center` is normalized to `[0, 1)` and is
/// present exactly when the target is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub present: bool,
    pub center: Option<(f64, f64)>,
}

impl Annotation {
    pub fn absent() -> Self {
        Self {
            present: false,
            center: None,
        }
    }

    pub fn at(u: f64, v: f64) -> Self {
        Self {
            present: true,
            center: Some((u, v)),
        }
    }

    pub fn label(&self) -> Label {
        Label::from_present(self.present)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.present, self.center) {
            (true, None) => Err(Error::Validation("present target without a center".into())),
            (false, Some(_)) => Err(Error::Validation("absent target with a center".into())),
            (true, Some((u, v))) if !((0.0..1.0).contains(&u) && (0.0..1.0).contains(&v)) => Err(
                Error::Validation(format!("center ({u}, {v}) outside [0, 1)")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub train: Vec<(Frame, Annotation)>,
    pub test: Vec<(Frame, Annotation)>,
    /// Generator seed and parameters, when synthetic.
    pub origin: Option<(u64, GenParams)>,
}

impl Scenario {
    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.train
            .iter()
            .chain(&self.test)
            .next()
            .map(|(f, _)| (f.width, f.height))
    }

    pub fn test_counts(&self) -> (usize, usize) {
        let pos = self.test.iter().filter(|(_, a)| a.present).count();
        (pos, self.test.len() - pos)
    }

    /// Checks contiguous indices, uniform frame size, annotation invariants
    /// and an exactly balanced, nonempty test set.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Validation("scenario has no training frames".into()));
        }
        let (w, h) = self.frame_size().unwrap_or((0, 0));
        for (split, frames) in [("train", &self.train), ("test", &self.test)] {
            for (i, (frame, ann)) in frames.iter().enumerate() {
                if frame.index != i + 1 {
                    return Err(Error::Validation(format!(
                        "{split} frame at position {} has index {}",
                        i + 1,
                        frame.index
                    )));
                }
                if (frame.width, frame.height) != (w, h) {
                    return Err(Error::Validation(format!(
                        "{split} frame {} is {}x{}, expected {w}x{h}",
                        frame.index, frame.width, frame.height
                    )));
                }
                ann.validate()?;
            }
        }
        let (pos, neg) = self.test_counts();
        if pos == 0 || pos != neg {
            return Err(Error::Validation(format!(
                "test set must be balanced and nonempty: {pos} positive, {neg} negative"
            )));
        }
        Ok(())
    }

    /// Classifier inputs for the training stream.
    pub fn train_inputs(&self, side: usize) -> Result<Vec<InputImage>> {
        self.train.iter().map(|(f, _)| f.to_input(side)).collect()
    }

    /// Classifier inputs and labels for the test set.
    pub fn test_set(&self, side: usize) -> Result<Vec<(InputImage, Label)>> {
        self.test
            .iter()
            .map(|(f, a)| Ok((f.to_input(side)?, a.label())))
            .collect()
    }
}
