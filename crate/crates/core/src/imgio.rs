//! Float image buffers and the on-disk formats used by the pipeline
//! (8-bit PNG for color/mask images, little-endian PFM for depth).

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// RGB image with channels in [0,1], row-major from the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgbF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ImageRgbF {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, c: [f64; 3]) {
        self.data[row * self.width + col] = c;
    }

    /// Bilinear sample in pixel-center coordinates: pixel (r, c) sits at
    /// (x, y) = (c + 0.5, r + 0.5). Clamps to the border.
    pub fn bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let (w0, w1, i0, i1, j0, j1) = bilinear_taps(x, y, self.width, self.height);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = self.data[i0 * self.width + j0][ch] * (1.0 - w0)
                + self.data[i0 * self.width + j1][ch] * w0;
            let bot = self.data[i1 * self.width + j0][ch] * (1.0 - w0)
                + self.data[i1 * self.width + j1][ch] * w0;
            out[ch] = top * (1.0 - w1) + bot * w1;
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (idx, px) in self.data.iter().enumerate() {
            let r = (idx / self.width) as u32;
            let c = (idx % self.width) as u32;
            buf.put_pixel(c, r, image::Rgb([quant8(px[0]), quant8(px[1]), quant8(px[2])]));
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h);
        for r in 0..h {
            for c in 0..w {
                let p = img.get_pixel(c as u32, r as u32);
                out.set(r, c, [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]);
            }
        }
        Ok(out)
    }
}

/// Single-channel image in [0,1]; used for masks and validity maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrayF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageGrayF {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (w0, w1, i0, i1, j0, j1) = bilinear_taps(x, y, self.width, self.height);
        let top = self.data[i0 * self.width + j0] * (1.0 - w0) + self.data[i0 * self.width + j1] * w0;
        let bot = self.data[i1 * self.width + j0] * (1.0 - w0) + self.data[i1 * self.width + j1] * w0;
        top * (1.0 - w1) + bot * w1
    }

    /// Minimum of the four pixels a bilinear tap at (x, y) would touch.
    /// A conservative foreground test for masks.
    pub fn min4(&self, x: f64, y: f64) -> f64 {
        let (_, _, i0, i1, j0, j1) = bilinear_taps(x, y, self.width, self.height);
        self.data[i0 * self.width + j0]
            .min(self.data[i0 * self.width + j1])
            .min(self.data[i1 * self.width + j0])
            .min(self.data[i1 * self.width + j1])
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for (idx, v) in self.data.iter().enumerate() {
            let r = (idx / self.width) as u32;
            let c = (idx % self.width) as u32;
            buf.put_pixel(c, r, image::Luma([quant8(*v)]));
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h);
        for r in 0..h {
            for c in 0..w {
                out.set(r, c, img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0);
            }
        }
        Ok(out)
    }
}

#[inline]
fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> (f64, f64, usize, usize, usize, usize) {
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let j0 = fx.floor() as usize;
    let i0 = fy.floor() as usize;
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    (fx - j0 as f64, fy - i0 as f64, i0, i1, j0, j1)
}

#[inline]
fn quant8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a grayscale PFM ("Pf"), 32-bit float little-endian, rows
/// bottom-to-top per the format.
pub fn save_pfm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "pfm payload {} != {}x{}",
            data.len(),
            width,
            height
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "Pf\n{} {}\n-1.0\n", width, height)?;
    for row in (0..height).rev() {
        for col in 0..width {
            f.write_all(&(data[row * width + col] as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| Error::Parse("pfm header truncated".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Parse("pfm header not utf-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("Pf") {
        return Err(Error::Parse("not a grayscale pfm".into()));
    }
    let dims = lines.next().ok_or_else(|| Error::Parse("pfm missing dims".into()))?;
    let mut it = dims.split_whitespace();
    let width: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("pfm width".into()))?;
    let height: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("pfm height".into()))?;
    let scale: f64 = lines
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse("pfm scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Parse("big-endian pfm not supported".into()));
    }
    let payload = &bytes[header_end..];
    if payload.len() < width * height * 4 {
        return Err(Error::Parse("pfm payload truncated".into()));
    }
    let mut data = vec![0.0; width * height];
    for row in 0..height {
        let src_row = height - 1 - row;
        for col in 0..width {
            let off = (src_row * width + col) * 4;
            let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            data[row * width + col] = v as f64;
        }
    }
    Ok((width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_matches_corners_and_midpoints() {
        let mut img = ImageGrayF::new(2, 1);
        img.set(0, 0, 0.2);
        img.set(0, 1, 0.8);
        assert_eq!(img.bilinear(0.5, 0.5), 0.2);
        assert_eq!(img.bilinear(1.5, 0.5), 0.8);
        assert!((img.bilinear(1.0, 0.5) - 0.5).abs() < 1e-12);
        // clamp beyond the border
        assert_eq!(img.bilinear(-3.0, 0.5), 0.2);
    }

    #[test]
    fn pfm_round_trip() {
        let dir = std::env::temp_dir().join("texvocab_pfm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.pfm");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        save_pfm(&path, 4, 3, &data).unwrap();
        let (w, h, back) = load_pfm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in data.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
