//! PNG/JPEG decoding to `[-1, 1]` floats and 8-bit PNG encoding.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::{Error, Image, Result};

/// Loads an image as RGB (or single-channel for greyscale files) with
/// values mapped from `[0, 255]` to `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    Ok(from_dynamic(&img))
}

pub fn from_dynamic(img: &DynamicImage) -> Image {
    let to_unit = |v: u8| v as f64 / 127.5 - 1.0;
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Image::from_fn(h as usize, w as usize, 1, |i, j, _| to_unit(g.get_pixel(j as u32, i as u32)[0]))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Image::from_fn(h as usize, w as usize, 3, |i, j, k| to_unit(rgb.get_pixel(j as u32, i as u32)[k]))
        }
    }
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn to_dynamic(x: &Image) -> Result<DynamicImage> {
    let (h, w, c) = x.shape();
    let bytes: Vec<u8> = x.as_slice().iter().map(|v| to_byte(*v)).collect();
    match c {
        1 => GrayImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageLuma8),
        3 => RgbImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageRgb8),
        _ => None,
    }
    .ok_or_else(|| Error::InvalidArgument(format!("cannot encode a {c}-channel image")))
}

/// Saves as 8-bit PNG; values outside `[-1, 1]` are clamped.
pub fn save_png(x: &Image, path: &Path) -> Result<()> {
    to_dynamic(x)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
