//! Dense containers shared by every layer implementation.
//!
//! Feature maps are stored channel-major: element `(c, y, x)` lives at
//! `c * H * W + y * W + x`. Matrices are row-major.

use crate::error::{Error, Result};

/// A 3-D activation volume (channels x height x width).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

fn check_dims(c: usize, h: usize, w: usize) -> Result<()> {
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidDimension(format!(
            "feature map dims must be positive, got {c}x{h}x{w}"
        )));
    }
    Ok(())
}

impl FeatureMap {
    /// Zero-filled map.
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        check_dims(channels, height, width)?;
        Ok(Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        })
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(Error::InvalidDimension(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*bad));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Linear index of `(c, y, x)`, or `None` when out of range.
    pub fn index(&self, c: usize, y: usize, x: usize) -> Option<usize> {
        (c < self.channels && y < self.height && x < self.width)
            .then(|| (c * self.height + y) * self.width + x)
    }

    fn bounds_error(&self, c: usize, y: usize, x: usize) -> Error {
        Error::OutOfBounds {
            c,
            y,
            x,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> Result<f32> {
        self.index(c, y, x)
            .map(|i| self.data[i])
            .ok_or_else(|| self.bounds_error(c, y, x))
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(value));
        }
        let i = self
            .index(c, y, x)
            .ok_or_else(|| self.bounds_error(c, y, x))?;
        self.data[i] = value;
        Ok(())
    }

    /// One channel plane as a slice of `H * W` values.
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidDimension(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_volume_is_single_zero() {
        let fm = FeatureMap::new(1, 1, 1).unwrap();
        assert_eq!(fm.data(), &[0.0]);
    }

    #[test]
    fn network_input_volume() {
        let fm = FeatureMap::new(3, 416, 416).unwrap();
        assert_eq!(fm.len(), 519_168);
    }

    #[test]
    fn empty_axis_rejected() {
        assert!(matches!(
            FeatureMap::new(0, 4, 4),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn layout_is_channel_major() {
        let fm = FeatureMap::from_vec(2, 2, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(fm.at(1, 0, 1).unwrap(), 5.0);
        assert_eq!(fm.at(0, 0, 0).unwrap(), fm.data()[0]);
        assert!(matches!(fm.at(2, 0, 0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(FeatureMap::from_vec(1, 1, 2, vec![0.0, f32::NAN]).is_err());
        let mut fm = FeatureMap::new(1, 1, 1).unwrap();
        assert!(fm.set(0, 0, 0, f32::INFINITY).is_err());
    }

    proptest! {
        #[test]
        fn write_then_read(c in 1usize..5, h in 1usize..7, w in 1usize..7, v in -1e6f32..1e6, seed in any::<usize>()) {
            let mut fm = FeatureMap::new(c, h, w).unwrap();
            let (ci, yi, xi) = (seed % c, (seed / 7) % h, (seed / 61) % w);
            fm.set(ci, yi, xi, v).unwrap();
            prop_assert_eq!(fm.at(ci, yi, xi).unwrap(), v);
        }

        #[test]
        fn linear_index_is_bijection(c in 1usize..5, h in 1usize..7, w in 1usize..7) {
            let fm = FeatureMap::new(c, h, w).unwrap();
            let mut seen = vec![false; c * h * w];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let i = fm.index(ci, y, x).unwrap();
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }
    }
}
