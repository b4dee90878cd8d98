//! 8-bit RGB image carrier shared by the renderer, masks, metrics, and
//! artifact IO. Images are stored row-major, interleaved RGB. Binary PPM
//! (P6, maxval 255) is the on-disk format.

use crate::scene_graph::PixelRect;
use std::io::{self, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, len = width * height * 3.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, rect: &PixelRect) -> Image {
        assert!(rect.x1 <= self.width && rect.y1 <= self.height, "crop out of bounds");
        let mut out = Image::new(rect.width(), rect.height());
        for y in rect.y0..rect.y1 {
            let src = (y * self.width + rect.x0) * 3;
            let dst = ((y - rect.y0) * out.width) * 3;
            out.data[dst..dst + out.width * 3]
                .copy_from_slice(&self.data[src..src + out.width * 3]);
        }
        out
    }

    /// Channel-interleaved u8 -> planar [3, H, W] floats in [0, 1].
    pub fn to_f64_chw(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0] as f64 / 255.0;
            out[n + i] = px[1] as f64 / 255.0;
            out[2 * n + i] = px[2] as f64 / 255.0;
        }
        out
    }

    /// Planar [3, H, W] floats in [0, 1] -> rounded, clamped u8 image.
    pub fn from_f64_chw(data: &[f64], width: usize, height: usize) -> Image {
        let n = width * height;
        assert_eq!(data.len(), 3 * n, "channel-planar buffer size mismatch");
        let mut img = Image::new(width, height);
        for i in 0..n {
            for c in 0..3 {
                let v = (data[c * n + i] * 255.0).round().clamp(0.0, 255.0);
                img.data[i * 3 + c] = v as u8;
            }
        }
        img
    }

    /// Mean absolute per-channel difference in 8-bit units.
    pub fn mae_u8(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        sum / self.data.len() as f64
    }

    /// Draws a 1px rectangle outline (clamped to the image).
    pub fn draw_rect_outline(&mut self, rect: &PixelRect, rgb: [u8; 3]) {
        if rect.x0 >= self.width || rect.y0 >= self.height {
            return;
        }
        let x1 = rect.x1.min(self.width);
        let y1 = rect.y1.min(self.height);
        for x in rect.x0..x1 {
            self.set(x, rect.y0, rgb);
            self.set(x, y1 - 1, rgb);
        }
        for y in rect.y0..y1 {
            self.set(rect.x0, y, rgb);
            self.set(x1 - 1, y, rgb);
        }
    }
}

/// Bilinear resize on planar f64 channels. `src` is [C, h, w]; output is
/// [C, out_h, out_w]. Pixel centers convention: src_x = (dst_x + 0.5) * w/out_w - 0.5,
/// so same-size resize is the identity.
pub fn resize_bilinear_f64(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), channels * h * w);
    let mut out = vec![0.0; channels * out_h * out_w];
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let out_plane = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out_plane[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Crop an image to `rect` and bilinearly resize to `out` x `out`,
/// returned as planar [3, out, out] floats in [0, 1].
pub fn crop_resize_f64(image: &Image, rect: &PixelRect, out: usize) -> Vec<f64> {
    let patch = image.crop(rect);
    resize_bilinear_f64(
        &patch.to_f64_chw(),
        3,
        patch.height,
        patch.width,
        out,
        out,
    )
}

pub fn write_ppm<P: AsRef<Path>>(path: P, img: &Image) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm<P: AsRef<Path>>(path: P) -> io::Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad PPM"))
}

fn parse_ppm(bytes: &[u8]) -> Option<Image> {
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (start < pos).then(|| &bytes[start..pos])
    };
    if token()? != b"P6" {
        return None;
    }
    let width: usize = std::str::from_utf8(token()?).ok()?.parse().ok()?;
    let height: usize = std::str::from_utf8(token()?).ok()?.parse().ok()?;
    let maxval: usize = std::str::from_utf8(token()?).ok()?.parse().ok()?;
    if maxval != 255 {
        return None;
    }
    let data_start = pos + 1; // single whitespace after maxval
    let need = width * height * 3;
    let data = bytes.get(data_start..data_start + need)?.to_vec();
    Some(Image {
        width,
        height,
        data,
    })
}
