//! Dense video containers shared by the sampler, the reframer and the
//! rehabilitation loop. All of them are frame-major, channel-major,
//! row-major: index `((f * C + c) * H + y) * W + x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VideoError {
    #[error("data length {found} does not match shape {shape}")]
    LengthMismatch { shape: String, found: usize },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },
    #[error("value {value} at index {index} outside the allowed range")]
    OutOfRange { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        LatentShape {
            frames,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells per frame-plane (one channel of one frame).
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.frames, self.channels, self.height, self.width)
    }
}

/// Latent codes `z`, one `C x h x w` block per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    shape: LatentShape,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(shape: LatentShape) -> Self {
        LatentVideo {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: LatentShape, data: Vec<f64>) -> Result<Self, VideoError> {
        if data.len() != shape.len() {
            return Err(VideoError::LengthMismatch {
                shape: shape.to_string(),
                found: data.len(),
            });
        }
        Ok(LatentVideo { shape, data })
    }

    pub fn from_fn(shape: LatentShape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for fr in 0..shape.frames {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(fr, c, y, x));
                    }
                }
            }
        }
        LatentVideo { shape, data }
    }

    /// Standard normal entries drawn in storage order.
    pub fn gaussian(shape: LatentShape, rng: &mut SplitMix64) -> Self {
        LatentVideo {
            shape,
            data: (0..shape.len()).map(|_| rng.next_gaussian()).collect(),
        }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((f * s.channels + c) * s.height + y) * s.width + x
    }

    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(f, c, y, x)]
    }

    pub fn ensure_same_shape(&self, other: &LatentVideo) -> Result<(), VideoError> {
        if self.shape != other.shape {
            return Err(VideoError::ShapeMismatch {
                left: self.shape.to_string(),
                right: other.shape.to_string(),
            });
        }
        Ok(())
    }

    /// Elementwise `f(a, b)`, shapes checked.
    pub fn zip_map(&self, other: &LatentVideo, f: impl Fn(f64, f64) -> f64) -> Result<LatentVideo, VideoError> {
        self.ensure_same_shape(other)?;
        Ok(LatentVideo {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentVideo {
        LatentVideo {
            shape: self.shape,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// RGB video with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelVideo {
    pub const CHANNELS: usize = 3;

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        PixelVideo {
            frames,
            height,
            width,
            data: vec![0.0; frames * Self::CHANNELS * height * width],
        }
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, VideoError> {
        let expected = frames * Self::CHANNELS * height * width;
        if data.len() != expected {
            return Err(VideoError::LengthMismatch {
                shape: format!("{frames}x3x{height}x{width}"),
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(VideoError::OutOfRange { index, value });
        }
        Ok(PixelVideo {
            frames,
            height,
            width,
            data,
        })
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn from_vec_clamped(frames: usize, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self, VideoError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        PixelVideo::from_vec(frames, height, width, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * Self::CHANNELS + c) * self.height + y) * self.width + x
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f64; 3] {
        [
            self.data[self.index(f, 0, y, x)],
            self.data[self.index(f, 1, y, x)],
            self.data[self.index(f, 2, y, x)],
        ]
    }

    pub fn set_pixel(&mut self, f: usize, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            let i = self.index(f, c, y, x);
            self.data[i] = v.clamp(0.0, 1.0);
        }
    }

    /// Frame `f` as its own one-frame video.
    pub fn frame(&self, f: usize) -> PixelVideo {
        let n = Self::CHANNELS * self.height * self.width;
        PixelVideo {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.data[f * n..(f + 1) * n].to_vec(),
        }
    }

    /// Concatenates one-frame videos of equal size.
    pub fn stack(frames: &[PixelVideo]) -> Result<PixelVideo, VideoError> {
        let first = frames.first().ok_or(VideoError::LengthMismatch {
            shape: "at least one frame".into(),
            found: 0,
        })?;
        let mut data = Vec::new();
        let mut count = 0;
        for fr in frames {
            if fr.height != first.height || fr.width != first.width {
                return Err(VideoError::ShapeMismatch {
                    left: format!("{}x{}", first.height, first.width),
                    right: format!("{}x{}", fr.height, fr.width),
                });
            }
            data.extend_from_slice(&fr.data);
            count += fr.frames;
        }
        Ok(PixelVideo {
            frames: count,
            height: first.height,
            width: first.width,
            data,
        })
    }

    /// Mean over frames `j >= 1` of the squared difference to frame `j - 1`,
    /// summed over pixels and channels.
    pub fn frame_difference_energy(&self) -> f64 {
        if self.frames < 2 {
            return 0.0;
        }
        let n = Self::CHANNELS * self.height * self.width;
        let total: f64 = (1..self.frames)
            .map(|f| {
                let (prev, cur) = (&self.data[(f - 1) * n..f * n], &self.data[f * n..(f + 1) * n]);
                prev.iter().zip(cur).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum();
        total / (self.frames - 1) as f64
    }
}

/// Per-cell known/unknown field: 1 = known (rendered), 0 = unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl OcclusionMask {
    pub fn filled(frames: usize, height: usize, width: usize, value: bool) -> Self {
        OcclusionMask {
            frames,
            height,
            width,
            data: vec![value as u8; frames * height * width],
        }
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self, VideoError> {
        if data.len() != frames * height * width {
            return Err(VideoError::LengthMismatch {
                shape: format!("{frames}x{height}x{width}"),
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(VideoError::OutOfRange {
                index,
                value: value as f64,
            });
        }
        Ok(OcclusionMask {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn index(&self, f: usize, y: usize, x: usize) -> usize {
        (f * self.height + y) * self.width + x
    }

    pub fn is_known(&self, f: usize, y: usize, x: usize) -> bool {
        self.data[self.index(f, y, x)] == 1
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, known: bool) {
        let i = self.index(f, y, x);
        self.data[i] = known as u8;
    }

    pub fn known_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of known cells.
    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.known_count() as f64 / self.data.len() as f64
    }

    /// Whether the mask can be broadcast over the channels of `shape`.
    pub fn matches(&self, shape: LatentShape) -> bool {
        self.frames == shape.frames && self.height == shape.height && self.width == shape.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_indexing_is_row_major() {
        let shape = LatentShape::new(2, 3, 4, 5);
        let z = LatentVideo::from_fn(shape, |f, c, y, x| (f * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(z.get(1, 2, 3, 4), 1234.0);
        assert_eq!(z.data()[z.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(z.data().len(), 120);
    }

    #[test]
    fn rejects_bad_lengths_and_ranges() {
        assert!(LatentVideo::from_vec(LatentShape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(PixelVideo::from_vec(1, 1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(OcclusionMask::from_vec(1, 1, 2, vec![0, 2]).is_err());
        let clamped = PixelVideo::from_vec_clamped(1, 1, 1, vec![-0.5, f64::NAN, 2.0]).unwrap();
        assert_eq!(clamped.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn frame_difference_energy_of_constant_video_is_zero() {
        let v = PixelVideo::from_vec(3, 2, 2, vec![0.25; 36]).unwrap();
        assert_eq!(v.frame_difference_energy(), 0.0);
        let mut w = v.clone();
        w.set_pixel(2, 0, 0, [1.0, 0.25, 0.25]);
        // One changed transition out of two.
        assert!((w.frame_difference_energy() - 0.75f64.powi(2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn stack_and_split_frames() {
        let a = PixelVideo::from_vec(1, 1, 2, vec![0.1; 6]).unwrap();
        let b = PixelVideo::from_vec(1, 1, 2, vec![0.2; 6]).unwrap();
        let s = PixelVideo::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.frames(), 2);
        assert_eq!(s.frame(0), a);
    }

    #[test]
    fn mask_coverage() {
        let mut m = OcclusionMask::filled(1, 2, 2, false);
        m.set(0, 1, 1, true);
        assert_eq!(m.coverage(), 0.25);
        assert!(m.is_known(0, 1, 1));
    }
}
