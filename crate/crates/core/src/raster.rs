//! Dense row-major rasters for images, depth maps and per-pixel weights.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// A `width × height × channels` grid of `f32` values stored row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "raster must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::MalformedRaster(format!(
                "expected {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("filled raster with invalid shape")
    }

    /// Single-channel raster built from a function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data).expect("from_fn with invalid shape")
    }

    /// Three-channel raster built from a function of `(x, y)`.
    pub fn from_fn_rgb(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, 3, data).expect("from_fn_rgb with invalid shape")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// All channels of pixel `idx` (row-major pixel index).
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Channel mean as a single-channel raster.
    pub fn intensity(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f32>() / self.channels as f32)
            .collect();
        Raster::new(self.width, self.height, 1, data).unwrap()
    }

    /// Mean of the valid (positive, finite) depth values, or `None` if there are none.
    pub fn mean_valid_depth(&self) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .filter(|&&d| is_valid_depth(d))
            .fold((0.0f64, 0usize), |(s, n), &d| (s + d as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn same_shape(&self, other: &Raster) -> Result<()> {
        check_dims(self.dims(), other.dims())?;
        if self.channels != other.channels {
            return Err(Error::InvalidArgument(format!(
                "channel mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_single_channel(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::InvalidArgument(format!(
                "{what} must be single-channel, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Depth values that are non-positive or non-finite are invalid.
#[inline]
pub fn is_valid_depth(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    weights: Vec<f32>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "validity mask expects {} weights, got {}",
                width * height,
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidArgument(format!(
                "validity weight {w} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            weights,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("invalid fill weight")
    }

    /// Weight 1 inside `mask`, 0 outside.
    pub fn from_mask(mask: &crate::mask::BinaryMask) -> Self {
        let (width, height) = mask.dims();
        let weights = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self { width, height, weights }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f32 {
        self.weights[idx]
    }

    /// Pointwise product with another mask of the same shape.
    pub fn product(&self, other: &ValidityMask) -> Result<ValidityMask> {
        check_dims(self.dims(), other.dims())?;
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a * b)
            .collect();
        Ok(ValidityMask {
            width: self.width,
            height: self.height,
            weights,
        })
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }

    pub fn count_positive(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Raster::new(0, 2, 1, vec![]).is_err());
        assert!(Raster::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(matches!(
            Raster::new(2, 2, 1, vec![0.0; 3]),
            Err(Error::MalformedRaster(_))
        ));
    }

    #[test]
    fn intensity_is_channel_mean() {
        let r = Raster::new(1, 1, 3, vec![0.0, 0.3, 0.9]).unwrap();
        assert!((r.intensity().get(0, 0, 0) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn validity_range_enforced() {
        assert!(ValidityMask::new(1, 1, vec![1.5]).is_err());
        assert!(ValidityMask::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn mean_depth_ignores_invalid() {
        let d = Raster::new(4, 1, 1, vec![2.0, -1.0, 0.0, 4.0]).unwrap();
        assert_eq!(d.mean_valid_depth(), Some(3.0));
    }
}
