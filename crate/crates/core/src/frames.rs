//! Frame sequences and per-step sinograms.

use serde::{Deserialize, Serialize};
use tcr_nn::Tensor;

use crate::error::{CoreError, Result};

/// Time-ordered stack of square images, row-major, row index ↔ ascending y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub size: usize,
    pub frames: Vec<Vec<f64>>,
}

impl FrameSequence {
    pub fn new(size: usize, frames: Vec<Vec<f64>>) -> Result<Self> {
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != size * size) {
            return Err(CoreError::input("frames", format!("frame {t} has {} pixels, expected {}", f.len(), size * size)));
        }
        Ok(FrameSequence { size, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn slice(&self, start: usize, end: usize) -> FrameSequence {
        FrameSequence {
            size: self.size,
            frames: self.frames[start..end].to_vec(),
        }
    }

    /// `[1, 1, T, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.frames.iter().flatten().map(|&v| v as f32).collect();
        Tensor::new(&[1, 1, self.len(), self.size, self.size], data).expect("frame tensor")
    }

    /// Inverse of [`FrameSequence::to_tensor`] for any `[.., T, H, W]` tensor with a single batch item.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() < 3 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(CoreError::input("frames", format!("tensor shape {s:?} is not [.., T, H, H]")));
        }
        let size = s[s.len() - 1];
        let n = t.len() / (size * size);
        let frames = t.data().chunks(size * size).take(n).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        Ok(FrameSequence { size, frames })
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinoStep {
    pub angles: Vec<f64>,
    /// `angles.len() × n_offsets`, row-major.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    pub offsets: Vec<f64>,
    pub steps: Vec<SinoStep>,
}

impl Sinogram {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            if s.data.len() != s.angles.len() * self.offsets.len() {
                return Err(CoreError::input(
                    "sinogram",
                    format!("step {t}: {} values for {}×{}", s.data.len(), s.angles.len(), self.offsets.len()),
                ));
            }
            if s.data.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::input("sinogram", format!("step {t}: non-finite entry")));
            }
        }
        Ok(())
    }
}

/// Rounds every value to the nearest f32 so persisted copies compare equal.
pub fn quantize(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}
