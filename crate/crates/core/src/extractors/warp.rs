//! Bilinear resampling as an explicit linear operator.
//!
//! Each output pixel reads four input pixels with fixed weights, so the same
//! tap table gives both the forward map and its adjoint. Resizing and the
//! geometric augmentations are both expressed this way.

use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearWarp {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl LinearWarp {
    /// Builds a warp from a map of output pixel centres to input
    /// coordinates (in input pixel units, centres at `i + 0.5`). Samples
    /// outside the input are clamped to the border.
    pub fn from_fn(
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        source: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let (ih, iw) = in_hw;
        let mut taps = Vec::with_capacity(out_hw.0 * out_hw.1);
        for i in 0..out_hw.0 {
            for j in 0..out_hw.1 {
                let (sy, sx) = source(i as f64 + 0.5, j as f64 + 0.5);
                let y = (sy - 0.5).clamp(0.0, (ih - 1) as f64);
                let x = (sx - 0.5).clamp(0.0, (iw - 1) as f64);
                let y0 = y.floor() as usize;
                let x0 = x.floor() as usize;
                let y1 = (y0 + 1).min(ih - 1);
                let x1 = (x0 + 1).min(iw - 1);
                let fy = y - y0 as f64;
                let fx = x - x0 as f64;
                taps.push([
                    (y0 * iw + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * iw + x1, (1.0 - fy) * fx),
                    (y1 * iw + x0, fy * (1.0 - fx)),
                    (y1 * iw + x1, fy * fx),
                ]);
            }
        }
        Self { in_hw, out_hw, taps }
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let sy = in_hw.0 as f64 / out_hw.0 as f64;
        let sx = in_hw.1 as f64 / out_hw.1 as f64;
        Self::from_fn(in_hw, out_hw, |y, x| (y * sy, x * sx))
    }

    pub fn identity(hw: (usize, usize)) -> Self {
        Self::from_fn(hw, hw, |y, x| (y, x))
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.out_hw
    }

    fn check(&self, x: &Image, hw: (usize, usize)) -> Result<()> {
        if (x.height(), x.width()) != hw {
            return Err(Error::shape(hw, (x.height(), x.width())));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check(x, self.in_hw)?;
        let c = x.channels();
        let src = x.as_slice();
        let mut out = Image::zeros(self.out_hw.0, self.out_hw.1, c);
        let dst = out.as_slice_mut();
        for (p, taps) in self.taps.iter().enumerate() {
            for &(q, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for k in 0..c {
                    dst[p * c + k] += w * src[q * c + k];
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`Self::apply`].
    pub fn adjoint(&self, g: &Image) -> Result<Image> {
        self.check(g, self.out_hw)?;
        let c = g.channels();
        let src = g.as_slice();
        let mut out = Image::zeros(self.in_hw.0, self.in_hw.1, c);
        let dst = out.as_slice_mut();
        for (p, taps) in self.taps.iter().enumerate() {
            for &(q, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for k in 0..c {
                    dst[q * c + k] += w * src[p * c + k];
                }
            }
        }
        Ok(out)
    }
}
