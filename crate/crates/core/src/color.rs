//! Moment-based colour transfer.
//!
//! RGB images are rotated into an orthonormal opponent basis (luminance,
//! yellow-blue, red-green), each channel's mean and standard deviation are
//! matched to the reference, and the result is rotated back. Other channel
//! counts are matched channel by channel.

use crate::{Error, Image, Result};

const S3: f64 = 0.577_350_269_189_625_8; // 1/√3
const S6: f64 = 0.408_248_290_463_863; // 1/√6
const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Rows are the opponent axes; the matrix is orthonormal so its transpose
/// is its inverse.
const OPPONENT: [[f64; 3]; 3] = [[S3, S3, S3], [S6, S6, -2.0 * S6], [S2, -S2, 0.0]];

/// Standard deviations below this are treated as zero.
const MIN_STD: f64 = 1e-8;

fn to_opponent(x: &Image) -> Image {
    if x.channels() != 3 {
        return x.clone();
    }
    let mut out = x.clone();
    for px in out.as_slice_mut().chunks_exact_mut(3) {
        let v = [px[0], px[1], px[2]];
        for (r, row) in OPPONENT.iter().enumerate() {
            px[r] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
    out
}

fn from_opponent(x: &Image) -> Image {
    if x.channels() != 3 {
        return x.clone();
    }
    let mut out = x.clone();
    for px in out.as_slice_mut().chunks_exact_mut(3) {
        let v = [px[0], px[1], px[2]];
        for (k, p) in px.iter_mut().enumerate() {
            *p = OPPONENT[0][k] * v[0] + OPPONENT[1][k] * v[1] + OPPONENT[2][k] * v[2];
        }
    }
    out
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_moments(x: &Image) -> Vec<(f64, f64)> {
    let c = x.channels();
    let n = (x.height() * x.width()) as f64;
    let means = x.channel_means();
    let mut var = vec![0.0; c];
    for px in x.as_slice().chunks_exact(c) {
        for k in 0..c {
            let d = px[k] - means[k];
            var[k] += d * d;
        }
    }
    means.into_iter().zip(var).map(|(m, v)| (m, (v / n).sqrt())).collect()
}

/// Colour transfer without the final clamp, so the moments can be checked
/// exactly.
pub fn color_match_unclamped(x: &Image, reference: &Image) -> Result<Image> {
    if x.channels() != reference.channels() {
        return Err(Error::shape(reference.channels(), x.channels()));
    }
    if x.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("colour matching needs non-empty images".into()));
    }
    let xo = to_opponent(x);
    let ro = to_opponent(reference);
    let src = channel_moments(&xo);
    let dst = channel_moments(&ro);
    let c = x.channels();
    let mut out = xo;
    for px in out.as_slice_mut().chunks_exact_mut(c) {
        for k in 0..c {
            let (ms, ss) = src[k];
            let (md, sd) = dst[k];
            px[k] = if ss < MIN_STD || sd < MIN_STD { px[k] - ms + md } else { (px[k] - ms) * (sd / ss) + md };
        }
    }
    let out = from_opponent(&out);
    if !out.is_finite() {
        return Err(Error::NonFinite("colour matching".into()));
    }
    Ok(out)
}

/// Matches the colour distribution of `x` to `reference`, clamped to `[-1, 1]`.
pub fn color_match(x: &Image, reference: &Image) -> Result<Image> {
    Ok(color_match_unclamped(x, reference)?.clamp(-1.0, 1.0))
}
