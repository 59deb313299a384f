//! Planar RGB image buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Per-channel affine normalization `v' = (v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("normalization std must be positive and finite"));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn invert(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Input geometry and normalization a model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub width: usize,
    pub height: usize,
    pub normalization: Normalization,
}

/// RGB image stored channel-major: `data[c * h * w + y * w + x]`.
///
/// Before normalization every value lies in `[0, 1]`; afterwards values are
/// unbounded and `normalization` records the transform that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
    normalization: Option<Normalization>,
}

impl ImageBuffer {
    /// Builds a raw (pre-normalization) image; values must lie in `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("raw intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
            normalization: None,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let n = width * height;
        let mut data = Vec::with_capacity(n * CHANNELS);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, n));
        }
        Self::new(width, height, data)
    }

    /// Builds an image from interleaved RGB samples already scaled to `[0, 1]`.
    pub fn from_interleaved(width: usize, height: usize, rgb: &[f64]) -> Result<Self> {
        if rgb.len() != width * height * CHANNELS {
            return Err(Error::shape("interleaved buffer has wrong length"));
        }
        let n = width * height;
        let mut data = vec![0.0; n * CHANNELS];
        for (p, px) in rgb.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * n + p] = px[c];
            }
        }
        Self::new(width, height, data)
    }

    pub(crate) fn from_parts(
        width: usize,
        height: usize,
        data: Vec<f64>,
        normalization: Option<Normalization>,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * CHANNELS);
        Self {
            width,
            height,
            data,
            normalization,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub(crate) fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Maps back to raw intensities, clamped to `[0, 1]`, for display or saving.
    pub fn to_raw(&self) -> ImageBuffer {
        let Some(norm) = self.normalization else {
            return self.clone();
        };
        let n = self.width * self.height;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| norm.invert(i / n, v).clamp(0.0, 1.0))
            .collect();
        Self::from_parts(self.width, self.height, data, None)
    }

    /// Interleaved 8-bit RGB, for encoding. Normalized images are inverted first.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let raw = self.to_raw();
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * CHANNELS);
        for p in 0..n {
            for c in 0..CHANNELS {
                out.push((raw.data[c * n + p] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}
