//! Minimal float rasters with bilinear sampling, plus PNG/PGM I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb, Rgba};

use crate::{Error, Result};

/// Single-channel image, values nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Three-channel image, values nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at integers).
    /// Returns `None` outside `[0, w-1] × [0, h-1]`.
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        let (x0, y0, fx, fy) = bilinear_cell(x, y, self.width, self.height)?;
        let i = y0 * self.width + x0;
        let (x1, y1) = (usize::from(fx > 0.0), usize::from(fy > 0.0));
        let a = self.data[i];
        let b = self.data[i + x1];
        let c = self.data[i + y1 * self.width];
        let d = self.data[i + y1 * self.width + x1];
        let top = a + (b - a) * fx;
        let bot = c + (d - c) * fx;
        Some(top + (bot - top) * fy)
    }
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self { width, height, data: vec![rgb; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, v: [f32; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Bilinear sample, `None` outside the image.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let (x0, y0, fx, fy) = bilinear_cell(x, y, self.width, self.height)?;
        let i = y0 * self.width + x0;
        let (x1, y1) = (usize::from(fx > 0.0), usize::from(fy > 0.0));
        let a = self.data[i];
        let b = self.data[i + x1];
        let c = self.data[i + y1 * self.width];
        let d = self.data[i + y1 * self.width + x1];
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bot = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bot - top) * fy;
        }
        Some(out)
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect(),
        }
    }

    pub fn from_gray(g: &GrayImage) -> Self {
        Self { width: g.width, height: g.height, data: g.data.iter().map(|&v| [v, v, v]).collect() }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.get(x as usize, y as usize);
            Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            data: img.pixels().map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]).collect(),
        }
    }
}

#[inline]
fn bilinear_cell(x: f64, y: f64, w: usize, h: usize) -> Option<(usize, usize, f32, f32)> {
    if w == 0 || h == 0 || !(x >= 0.0 && y >= 0.0) {
        return None;
    }
    let (mx, my) = ((w - 1) as f64, (h - 1) as f64);
    if x > mx || y > my {
        return None;
    }
    // On the last row/column the fraction is exactly zero, so edge samples
    // reproduce pixel values bit for bit.
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    Some((x0, y0, fx, fy))
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Loads a PNG, PNM or JPEG file as a color image (grayscale inputs are replicated).
pub fn load_color(path: &Path) -> Result<ColorImage> {
    let img = image::open(path)?;
    Ok(ColorImage::from_rgb8(&img.to_rgb8()))
}

pub fn save_color(path: &Path, img: &ColorImage) -> Result<()> {
    img.to_rgb8().save(path)?;
    Ok(())
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| Luma([to_u8(img.get(x as usize, y as usize))]));
    buf.save(path)?;
    Ok(())
}

/// Writes RGB plus an alpha mask.
pub fn save_rgba(path: &Path, img: &ColorImage, mask: &[bool]) -> Result<()> {
    if mask.len() != img.data.len() {
        return Err(Error::Format("mask size differs from image size".into()));
    }
    let buf: ImageBuffer<Rgba<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let i = y as usize * img.width + x as usize;
        let c = img.data[i];
        Rgba([to_u8(c[0]), to_u8(c[1]), to_u8(c[2]), if mask[i] { 255 } else { 0 }])
    });
    DynamicImage::ImageRgba8(buf).save(path)?;
    Ok(())
}

/// Loads an RGBA PNG into color + mask (alpha > 0).
pub fn load_rgba(path: &Path) -> Result<(ColorImage, Vec<bool>)> {
    let img = image::open(path)?.to_rgba8();
    let (w, h) = img.dimensions();
    let mut color = ColorImage::new(w as usize, h as usize);
    let mut mask = vec![false; (w * h) as usize];
    for (i, p) in img.pixels().enumerate() {
        color.data[i] = [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0];
        mask[i] = p[3] > 0;
    }
    Ok((color, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_and_bounds() {
        let g = GrayImage::from_fn(3, 2, |x, y| (x + 10 * y) as f32);
        assert_eq!(g.sample(0.0, 0.0), Some(0.0));
        assert_eq!(g.sample(2.0, 1.0), Some(12.0));
        assert_eq!(g.sample(0.5, 0.5), Some(5.5));
        assert_eq!(g.sample(1.25, 0.0), Some(1.25));
        assert_eq!(g.sample(2.01, 0.0), None);
        assert_eq!(g.sample(-0.01, 0.0), None);
    }

    #[test]
    fn png_round_trip_with_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut img = ColorImage::new(4, 3);
        img.put(1, 2, [1.0, 0.5, 0.0]);
        let mut mask = vec![true; 12];
        mask[0] = false;
        save_rgba(&p, &img, &mask).unwrap();
        let (back, m) = load_rgba(&p).unwrap();
        assert_eq!(m, mask);
        assert_eq!(to_u8(back.get(1, 2)[1]), 128);
    }
}
