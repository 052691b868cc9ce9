use ndarray::{Array3, Zip};

use crate::{Error, Result};

/// An `H×W×C` real-valued image. Values nominally live in `[-1, 1]`, but
/// intermediate states of a guided trajectory may leave that range.
///
/// The same type carries noise draws and gradients, which share the shape of
/// the image they act on.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { data: Array3::zeros((h, w, c)) }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self { data: Array3::from_elem((h, w, c), value) }
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        Self { data: data.as_standard_layout().into_owned() }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w * c {
            return Err(Error::shape(h * w * c, values.len()));
        }
        let data = Array3::from_shape_vec((h, w, c), values)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self { data })
    }

    /// Builds an image from a per-pixel closure `f(row, col, channel)`.
    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Self { data: Array3::from_shape_fn((h, w, c), |(i, j, k)| f(i, j, k)) }
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.dim();
        (s.0, s.1, s.2)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    /// Flat row-major view (`H`, then `W`, then `C`).
    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("images are kept in standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("images are kept in standard layout")
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i, j, k)] = v;
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.mapv(f) }
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Image, b: f64) -> Result<Image> {
        self.ensure_same_shape(other)?;
        let mut out = self.data.clone();
        Zip::from(&mut out).and(&other.data).for_each(|o, &y| *o = a * *o + b * y);
        Ok(Image { data: out })
    }

    pub fn scale(&self, a: f64) -> Image {
        self.map(|v| a * v)
    }

    /// In-place `self += a·other`.
    pub fn add_scaled(&mut self, a: f64, other: &Image) -> Result<()> {
        self.ensure_same_shape(other)?;
        Zip::from(&mut self.data).and(&other.data).for_each(|o, &y| *o += a * y);
        Ok(())
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(Image { data: &self.data - &other.data })
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.as_slice().iter().sum::<f64>() / self.len().max(1) as f64
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let (h, w, c) = self.shape();
        let mut means = vec![0.0; c];
        for px in self.as_slice().chunks_exact(c) {
            for (m, v) in means.iter_mut().zip(px) {
                *m += v;
            }
        }
        let n = (h * w).max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Mirror along the vertical axis (left/right swap).
    pub fn flip_horizontal(&self) -> Image {
        let (h, w, c) = self.shape();
        Image::from_fn(h, w, c, |i, j, k| self.get(i, w - 1 - j, k))
    }
}
