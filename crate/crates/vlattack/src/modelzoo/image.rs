//! Image tensors: `height × width × channels` pixel grids in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// A dense image with `f64` pixel intensities in `[0, 1]`, stored row-major
/// as `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image from flat pixel data, validating length and range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image data length {} does not match {height}×{width}×{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Input(format!(
                "pixel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// All-black image.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, value: f64) {
        debug_assert!((0.0..=1.0).contains(&value), "pixel {value} outside [0, 1]");
        self.data[(y * self.width + x) * self.channels + ch] = value;
    }

    /// Replaces the pixel buffer wholesale. The caller guarantees the values
    /// are already in `[0, 1]`; debug builds verify.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    /// Unvalidated constructor for intermediate values that may leave
    /// `[0, 1]` — descent iterates before projection and finite-difference
    /// probes. Never hand one of these to a model or a query.
    pub(crate) fn raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// ℓ∞ distance to another image of the same shape.
    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.dims(), other.dims(), "linf_distance: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Projects each pixel into the ℓ∞ ball of the given radius around
    /// `original`, then clamps to `[0, 1]`. The distance to `original` may
    /// exceed the radius by at most one floating-point rounding step (the
    /// query gateway's admission slack covers this); with radius `0` the
    /// result equals `original` exactly.
    pub fn project_into_ball(&self, original: &ImageTensor, radius: f64) -> ImageTensor {
        assert_eq!(self.dims(), original.dims(), "project: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&original.data)
            .map(|(&v, &o)| v.clamp(o - radius, o + radius).clamp(0.0, 1.0))
            .collect();
        original.with_data(data)
    }

    /// Flat `1×(h·w·c)` row matrix for feeding the patch encoder.
    pub fn flat_matrix(&self) -> Matrix {
        Matrix::from_shape_vec((1, self.data.len()), self.data.clone())
            .expect("image buffer length matches dims")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_and_range() {
        assert!(ImageTensor::new(2, 2, 1, vec![0.0, 0.5, 1.0, 0.25]).is_ok());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.25]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0, -0.1, 1.0, 0.5]).is_err());
        assert!(ImageTensor::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn indexing_is_row_major_channel_minor() {
        let mut img = ImageTensor::zeros(2, 3, 2);
        img.set(1, 2, 1, 0.75);
        assert_eq!(img.get(1, 2, 1), 0.75);
        assert_eq!(img.data()[(1 * 3 + 2) * 2 + 1], 0.75);
    }

    #[test]
    fn projection_with_zero_radius_returns_original() {
        let original = ImageTensor::new(1, 2, 1, vec![0.25, 0.75]).unwrap();
        let moved = ImageTensor::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let projected = moved.project_into_ball(&original, 0.0);
        assert_eq!(projected, original);
    }

    #[test]
    fn projection_bounds_distance_and_range() {
        let original = ImageTensor::new(1, 3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let moved = ImageTensor::new(1, 3, 1, vec![0.9, 0.1, 0.2]).unwrap();
        let projected = moved.project_into_ball(&original, 0.3);
        // Clamping against `original ± radius` can overshoot the radius by
        // one rounding step, which the query gateway's slack absorbs.
        assert!(projected.linf_distance(&original) <= 0.3 * (1.0 + 1e-12));
        assert!(projected.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (p, e) in projected.data().iter().zip([0.3, 0.2, 0.7]) {
            assert!((p - e).abs() < 1e-12, "pixel {p} vs {e}");
        }
    }
}
