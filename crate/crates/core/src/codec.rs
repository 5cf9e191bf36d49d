//! Lossless patch codec: `s x s` RGBA patches are rearranged into
//! `4 * s * s` channels per latent cell (space-to-depth).
//!
//! The codec is linear and exactly invertible, so every reconstruction error
//! downstream belongs to the generative model, not to compression.

use crate::canvas::{Rect, RgbaImage};
use crate::error::{Error, Result};

pub const DEFAULT_PATCH: u32 = 8;

/// Latent tensor of `h x w` cells, each holding `channels()` values laid out
/// as `(dy, dx, rgba)` with `rgba` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    patch: u32,
    h: u32,
    w: u32,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn zeros(patch: u32, h: u32, w: u32) -> Self {
        let c = channels(patch);
        LatentGrid { patch, h, w, data: vec![0.0; c * (h * w) as usize] }
    }

    pub fn from_data(patch: u32, h: u32, w: u32, data: Vec<f32>) -> Result<Self> {
        if patch == 0 || data.len() != channels(patch) * (h * w) as usize {
            return Err(Error::Dimension(format!(
                "{} values for a {h}x{w} grid with patch {patch}",
                data.len()
            )));
        }
        Ok(LatentGrid { patch, h, w, data })
    }

    pub fn patch(&self) -> u32 {
        self.patch
    }

    pub fn h(&self) -> u32 {
        self.h
    }

    pub fn w(&self) -> u32 {
        self.w
    }

    pub fn channels(&self) -> usize {
        channels(self.patch)
    }

    pub fn cells(&self) -> usize {
        (self.h * self.w) as usize
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Channel vector of cell `(row, col)`.
    pub fn cell(&self, row: u32, col: u32) -> &[f32] {
        let c = self.channels();
        let i = (row * self.w + col) as usize * c;
        &self.data[i..i + c]
    }
}

pub fn channels(patch: u32) -> usize {
    4 * (patch * patch) as usize
}

/// Smallest `s`-aligned rectangle containing `rect`.
pub fn snap_rect(rect: Rect, s: u32) -> Rect {
    assert!(s >= 1, "patch size must be positive");
    let s = s as i64;
    let x0 = (rect.x as i64).div_euclid(s) * s;
    let y0 = (rect.y as i64).div_euclid(s) * s;
    let x1 = (rect.right() + s - 1).div_euclid(s) * s;
    let y1 = (rect.bottom() + s - 1).div_euclid(s) * s;
    Rect { x: x0 as i32, y: y0 as i32, w: (x1 - x0) as u32, h: (y1 - y0) as u32 }
}

/// Number of latent cells a region occupies once snapped.
pub fn token_count(rect: Rect, s: u32) -> usize {
    let r = snap_rect(rect, s);
    ((r.w / s) * (r.h / s)) as usize
}

pub fn encode(img: &RgbaImage, s: u32) -> Result<LatentGrid> {
    if s == 0 || img.width() % s != 0 || img.height() % s != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} image is not divisible by patch {s}",
            img.width(),
            img.height()
        )));
    }
    let (h, w) = (img.height() / s, img.width() / s);
    let mut data = Vec::with_capacity(channels(s) * (h * w) as usize);
    for row in 0..h {
        for col in 0..w {
            for dy in 0..s {
                for dx in 0..s {
                    data.extend_from_slice(&img.get(col * s + dx, row * s + dy));
                }
            }
        }
    }
    Ok(LatentGrid { patch: s, h, w, data })
}

/// Exact inverse of [`encode`]; values are passed through untouched.
pub fn decode(z: &LatentGrid) -> RgbaImage {
    let s = z.patch;
    let mut img = RgbaImage::transparent(z.w * s, z.h * s);
    let mut it = z.data.chunks_exact(4);
    for row in 0..z.h {
        for col in 0..z.w {
            for dy in 0..s {
                for dx in 0..s {
                    let c = it.next().expect("grid length checked at construction");
                    img.set(col * s + dx, row * s + dy, [c[0], c[1], c[2], c[3]]);
                }
            }
        }
    }
    img
}

/// Decode, then clamp into the premultiplied-valid range. Returns the image
/// and the fraction of channel values that were out of range.
pub fn decode_clamped(z: &LatentGrid) -> (RgbaImage, f64) {
    let mut img = decode(z);
    let frac = img.clamp_premultiplied();
    (img, frac)
}

/// Count of latent values outside `[0, 1]`.
pub fn out_of_range(z: &LatentGrid) -> usize {
    z.data.iter().filter(|v| !(0.0..=1.0).contains(*v)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snap_examples() {
        let r = Rect::new(8, 16, 8, 8).unwrap();
        assert_eq!(snap_rect(r, 8), r);
        assert_eq!(snap_rect(Rect::new(1, 1, 2, 2).unwrap(), 8), Rect::new(0, 0, 8, 8).unwrap());
        assert_eq!(snap_rect(Rect::new(-3, 7, 2, 2).unwrap(), 8), Rect::new(-8, 0, 8, 16).unwrap());
    }

    #[test]
    fn transparent_encodes_to_zero() {
        let z = encode(&RgbaImage::transparent(16, 8), 8).unwrap();
        assert_eq!((z.h(), z.w(), z.channels()), (1, 2, 256));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_of_single_patch() {
        let z = encode(&RgbaImage::filled(8, 8, [0.25; 4]), 8).unwrap();
        assert_eq!((z.h(), z.w(), z.data().len()), (1, 1, 256));
    }

    #[test]
    fn rejects_indivisible() {
        assert!(matches!(encode(&RgbaImage::transparent(9, 8), 8), Err(Error::Dimension(_))));
    }

    #[test]
    fn clamped_decode_reports_violations() {
        let mut z = LatentGrid::zeros(1, 1, 2);
        z.data_mut().copy_from_slice(&[0.5, 0.0, 0.0, 0.4, 0.1, 0.1, 0.1, 1.5]);
        assert_eq!(out_of_range(&z), 1);
        let (img, frac) = decode_clamped(&z);
        assert_eq!(img.get(0, 0), [0.4, 0.0, 0.0, 0.4]);
        assert_eq!(img.get(1, 0), [0.1, 0.1, 0.1, 1.0]);
        assert_eq!(frac, 2.0 / 8.0);
    }
}
