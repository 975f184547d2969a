//! Floating-point image buffers and 8/16-bit PNG conversion.

use std::path::Path;

use image::{GrayImage as Gray8, ImageBuffer, Luma, Rgb, RgbImage as Rgb8};

use crate::{Error, Result};

/// Row-major RGB image with `f64` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|p| p.map(|v| v * s))
    }

    pub fn clamped(&self) -> Self {
        self.map(|p| p.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn mean(&self) -> [f64; 3] {
        let n = self.data.len().max(1) as f64;
        let mut acc = [0.0; 3];
        for p in &self.data {
            for c in 0..3 {
                acc[c] += p[c];
            }
        }
        acc.map(|v| v / n)
    }

    /// Channel `c` as a gray image.
    pub fn channel(&self, c: usize) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Rgb8 {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(x as usize, y as usize);
            Rgb(p.map(quantize))
        })
    }

    pub fn from_rgb8(img: &Rgb8) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32).0.map(|v| v as f64 / 255.0)
        })
    }

    /// Loads an 8-bit image (any color type) as floats in `[0, 1]`. No
    /// transfer function is applied.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::image(path, e))
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Stores `value · scale` as a 16-bit PNG.
    pub fn save_png16(&self, path: &Path, scale: f64) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let v = self.get(x as usize, y as usize) * scale;
                Luma([v.round().clamp(0.0, 65535.0) as u16])
            });
        buf.save(path).map_err(|e| Error::image(path, e))
    }

    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let buf: Gray8 = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.get(x as usize, y as usize))])
        });
        buf.save(path).map_err(|e| Error::image(path, e))
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RgbImage::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.5]);
        img.save_png(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        assert!(back.same_shape(&img));
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn export_clamps() {
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
    }
}
