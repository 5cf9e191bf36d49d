//! Layered RGBA documents.
//!
//! Pixels are stored as premultiplied `f32` RGBA in `[0, 1]`. With
//! premultiplication source-over is associative, which is what lets
//! [`group_layers`] merge a z-contiguous run of layers without changing the
//! composite. Straight alpha only appears at the PNG boundary (see
//! [`crate::bundle`]).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Pixel = [f32; 4];

pub const TRANSPARENT: Pixel = [0.0; 4];

/// Axis-aligned rectangle in canvas pixels. The origin may be negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: i32, y: i32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidDesign(format!("degenerate rect {w}x{h} at ({x},{y})")));
        }
        Ok(Rect { x, y, w, h })
    }

    pub fn right(&self) -> i64 {
        self.x as i64 + self.w as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y as i64 + self.h as i64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn contains_point(&self, x: i64, y: i64) -> bool {
        x >= self.x as i64 && y >= self.y as i64 && x < self.right() && y < self.bottom()
    }

    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        let r = self.right().max(other.right());
        let b = self.bottom().max(other.bottom());
        Rect { x, y, w: (r - x as i64) as u32, h: (b - y as i64) as u32 }
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x = self.x.max(other.x);
        let y = self.y.max(other.y);
        let r = self.right().min(other.right());
        let b = self.bottom().min(other.bottom());
        if r <= x as i64 || b <= y as i64 {
            return None;
        }
        Some(Rect { x, y, w: (r - x as i64) as u32, h: (b - y as i64) as u32 })
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Rect {
        Rect { x: self.x + dx, y: self.y + dy, ..*self }
    }
}

/// Premultiplied RGBA raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbaImage {
    width: u32,
    height: u32,
    pixels: Vec<Pixel>,
}

impl RgbaImage {
    pub fn transparent(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        RgbaImage { width, height, pixels: vec![TRANSPARENT; width as usize * height as usize] }
    }

    pub fn filled(width: u32, height: u32, px: Pixel) -> Self {
        let mut img = Self::transparent(width, height);
        img.pixels.fill(px);
        img
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Pixel>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width as usize * height as usize {
            return Err(Error::Dimension(format!(
                "{} pixels cannot form a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(RgbaImage { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Pixel] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Pixel {
        self.pixels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, px: Pixel) {
        self.pixels[(y * self.width + x) as usize] = px;
    }

    pub fn same_size(&self, other: &RgbaImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Largest amount by which any color channel exceeds its alpha, or any
    /// channel leaves `[0, 1]`.
    pub fn premultiplied_violation(&self) -> f32 {
        let mut worst = 0.0f32;
        for p in &self.pixels {
            for c in 0..3 {
                worst = worst.max(p[c] - p[3]).max(-p[c]);
            }
            worst = worst.max(p[3] - 1.0).max(-p[3]);
        }
        worst
    }

    pub fn is_fully_transparent(&self) -> bool {
        self.pixels.iter().all(|p| p[3] == 0.0)
    }

    /// Clamp every pixel into the premultiplied-valid set and return the
    /// fraction of channel values that had to move.
    pub fn clamp_premultiplied(&mut self) -> f64 {
        let mut moved = 0usize;
        for p in &mut self.pixels {
            let a = p[3].clamp(0.0, 1.0);
            if a != p[3] || p[3].is_nan() {
                moved += 1;
            }
            p[3] = if a.is_nan() { 0.0 } else { a };
            for c in 0..3 {
                let v = if p[c].is_nan() { 0.0 } else { p[c].clamp(0.0, p[3]) };
                if v != p[c] {
                    moved += 1;
                }
                p[c] = v;
            }
        }
        moved as f64 / (self.pixels.len() * 4) as f64
    }
}

/// Premultiply an 8-bit straight-alpha pixel. Both the generator and the PNG
/// loader go through this so that quantized colors round-trip bit-exactly.
#[inline]
pub fn premultiply_u8(px: [u8; 4]) -> Pixel {
    let a = px[3] as f32 / 255.0;
    [
        px[0] as f32 / 255.0 * a,
        px[1] as f32 / 255.0 * a,
        px[2] as f32 / 255.0 * a,
        a,
    ]
}

/// Inverse of [`premultiply_u8`] with rounding; transparent pixels map to zero.
#[inline]
pub fn unpremultiply_u8(px: Pixel) -> [u8; 4] {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let a = px[3].clamp(0.0, 1.0);
    if a <= 0.0 {
        return [0; 4];
    }
    [q(px[0] / a), q(px[1] / a), q(px[2] / a), q(a)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Background,
    Foreground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub image: RgbaImage,
    pub rect: Rect,
    pub z: i32,
    pub kind: LayerKind,
    pub caption: String,
}

/// A full-size canvas with one background and z-ordered foreground layers.
///
/// `layers[0]` is the background; the rest are foregrounds in ascending z.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredDesign {
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub bg_rect: Rect,
    pub layers: Vec<LayerRecord>,
    pub global_caption: String,
}

impl LayeredDesign {
    pub fn canvas_rect(&self) -> Rect {
        Rect { x: 0, y: 0, w: self.canvas_w, h: self.canvas_h }
    }

    pub fn background(&self) -> &LayerRecord {
        &self.layers[0]
    }

    pub fn foregrounds(&self) -> &[LayerRecord] {
        &self.layers[1..]
    }

    /// Number of foreground layers.
    pub fn k(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDesign(m));
        if self.canvas_w == 0 || self.canvas_h == 0 {
            return bad("canvas has zero extent".into());
        }
        let Some(bg) = self.layers.first() else {
            return bad("design has no layers".into());
        };
        if bg.kind != LayerKind::Background {
            return bad("lowest layer must be the background".into());
        }
        if self.layers.iter().filter(|l| l.kind == LayerKind::Background).count() != 1 {
            return bad("exactly one background layer is required".into());
        }
        if bg.rect != self.bg_rect {
            return bad(format!("background rect {:?} differs from bg_rect {:?}", bg.rect, self.bg_rect));
        }
        let canvas = self.canvas_rect();
        if !canvas.contains(&self.bg_rect) {
            return bad("bg_rect extends past the canvas".into());
        }
        let mut union = self.bg_rect;
        for (i, l) in self.layers.iter().enumerate() {
            if l.rect.w == 0 || l.rect.h == 0 {
                return bad(format!("layer {i} has a degenerate rect"));
            }
            if l.image.width() != l.rect.w || l.image.height() != l.rect.h {
                return bad(format!(
                    "layer {i} image is {}x{} but its rect is {}x{}",
                    l.image.width(),
                    l.image.height(),
                    l.rect.w,
                    l.rect.h
                ));
            }
            if i > 0 && l.z <= self.layers[i - 1].z {
                return bad(format!("layer {i} breaks strictly ascending z order"));
            }
            let v = l.image.premultiplied_violation();
            if v > 1e-6 || v.is_nan() {
                return bad(format!("layer {i} is not premultiplied (violation {v})"));
            }
            union = union.union(&l.rect);
        }
        if union != canvas {
            return bad(format!("canvas {canvas:?} is not the tight container {union:?} of its content"));
        }
        Ok(())
    }
}

/// Source-over: `out = fg + (1 - fg.a) * bg`, componentwise.
pub fn over(fg: &RgbaImage, bg: &RgbaImage) -> Result<RgbaImage> {
    if !fg.same_size(bg) {
        return Err(Error::Dimension(format!(
            "over: {}x{} vs {}x{}",
            fg.width, fg.height, bg.width, bg.height
        )));
    }
    let pixels = fg.pixels.iter().zip(&bg.pixels).map(|(f, b)| over_px(*f, *b)).collect();
    Ok(RgbaImage { width: fg.width, height: fg.height, pixels })
}

#[inline]
pub fn over_px(f: Pixel, b: Pixel) -> Pixel {
    let k = 1.0 - f[3];
    [f[0] + k * b[0], f[1] + k * b[1], f[2] + k * b[2], f[3] + k * b[3]]
}

/// Write `img` at `rect` onto a transparent `canvas_w x canvas_h` image,
/// silently discarding whatever falls outside.
pub fn place_image(img: &RgbaImage, rect: Rect, canvas_w: u32, canvas_h: u32) -> RgbaImage {
    let mut out = RgbaImage::transparent(canvas_w, canvas_h);
    blit(&mut out, img, rect, |_, src| src);
    out
}

pub fn place(layer: &LayerRecord, canvas_w: u32, canvas_h: u32) -> RgbaImage {
    place_image(&layer.image, layer.rect, canvas_w, canvas_h)
}

/// Visit the in-bounds overlap of `src` placed at `rect` on `dst`.
fn blit(dst: &mut RgbaImage, src: &RgbaImage, rect: Rect, f: impl Fn(Pixel, Pixel) -> Pixel) {
    let bounds = Rect { x: 0, y: 0, w: dst.width, h: dst.height };
    let Some(vis) = bounds.intersect(&rect) else { return };
    for y in vis.y..vis.bottom() as i32 {
        for x in vis.x..vis.right() as i32 {
            let s = src.get((x - rect.x) as u32, (y - rect.y) as u32);
            let d = dst.get(x as u32, y as u32);
            dst.set(x as u32, y as u32, f(d, s));
        }
    }
}

/// Composite every layer from lowest z upward onto a transparent canvas.
///
/// Equivalent to folding `over(place(layer), acc)`, but only touches the
/// in-bounds footprint of each layer: outside it the placed layer is
/// `(0,0,0,0)` and source-over returns the accumulator unchanged.
pub fn compose(design: &LayeredDesign) -> RgbaImage {
    let mut acc = RgbaImage::transparent(design.canvas_w, design.canvas_h);
    for layer in &design.layers {
        blit(&mut acc, &layer.image, layer.rect, |d, s| over_px(s, d));
    }
    acc
}

/// Exact sub-image copy.
pub fn visible_crop(img: &RgbaImage, rect: Rect) -> Result<RgbaImage> {
    let bounds = Rect { x: 0, y: 0, w: img.width, h: img.height };
    if rect.w == 0 || rect.h == 0 || !bounds.contains(&rect) {
        return Err(Error::OutOfBounds(format!(
            "crop {rect:?} outside {}x{} image",
            img.width, img.height
        )));
    }
    let mut pixels = Vec::with_capacity(rect.area() as usize);
    for y in 0..rect.h {
        let row = ((rect.y as u32 + y) * img.width + rect.x as u32) as usize;
        pixels.extend_from_slice(&img.pixels[row..row + rect.w as usize]);
    }
    Ok(RgbaImage { width: rect.w, height: rect.h, pixels })
}

/// The full-extent canvas plane: transparent everywhere.
pub fn canvas_layer(design: &LayeredDesign) -> RgbaImage {
    RgbaImage::transparent(design.canvas_w, design.canvas_h)
}

/// Restrict a design to `rect`, re-rooting coordinates at its origin.
/// Layers that miss `rect` entirely are dropped. `rect` must contain the
/// background's rect intersection, so in practice it is the visible region.
pub fn clip(design: &LayeredDesign, rect: Rect) -> Result<LayeredDesign> {
    if !design.canvas_rect().contains(&rect) {
        return Err(Error::OutOfBounds(format!("clip rect {rect:?} outside canvas")));
    }
    let mut layers = Vec::new();
    for l in &design.layers {
        let Some(part) = l.rect.intersect(&rect) else {
            if l.kind == LayerKind::Background {
                return Err(Error::InvalidDesign("clip rect misses the background".into()));
            }
            continue;
        };
        let local = part.translate(-l.rect.x, -l.rect.y);
        let image = visible_crop(&l.image, local)?;
        layers.push(LayerRecord { image, rect: part.translate(-rect.x, -rect.y), ..l.clone() });
    }
    let bg_rect = layers[0].rect;
    let mut out = LayeredDesign {
        canvas_w: rect.w,
        canvas_h: rect.h,
        bg_rect,
        layers,
        global_caption: design.global_caption.clone(),
    };
    // The clipped background may not span the whole clip rect; keep the canvas
    // the tight container of what is left.
    let union = out.layers.iter().fold(out.bg_rect, |u, l| u.union(&l.rect));
    if union != out.canvas_rect() {
        out = retighten(out, union);
    }
    Ok(out)
}

fn retighten(mut d: LayeredDesign, union: Rect) -> LayeredDesign {
    for l in &mut d.layers {
        l.rect = l.rect.translate(-union.x, -union.y);
    }
    d.bg_rect = d.layers[0].rect;
    d.canvas_w = union.w;
    d.canvas_h = union.h;
    d
}

/// Merge a z-contiguous run of foreground layers (indices into
/// `design.layers`) into one layer covering their union rect.
pub fn group_layers(design: &LayeredDesign, indices: &BTreeSet<usize>) -> Result<LayeredDesign> {
    let (Some(&lo), Some(&hi)) = (indices.first(), indices.last()) else {
        return Err(Error::InvalidDesign("group_layers needs at least one index".into()));
    };
    if hi >= design.layers.len() {
        return Err(Error::OutOfBounds(format!("layer index {hi} of {}", design.layers.len())));
    }
    if indices.iter().any(|&i| design.layers[i].kind == LayerKind::Background) {
        return Err(Error::InvalidDesign("the background cannot be grouped".into()));
    }
    if hi - lo + 1 != indices.len() {
        return Err(Error::InvalidDesign(format!(
            "grouped layers {indices:?} are not contiguous in z order"
        )));
    }
    let members = &design.layers[lo..=hi];
    let rect = members.iter().skip(1).fold(members[0].rect, |u, l| u.union(&l.rect));
    let mut image = RgbaImage::transparent(rect.w, rect.h);
    for m in members {
        blit(&mut image, &m.image, m.rect.translate(-rect.x, -rect.y), |d, s| over_px(s, d));
    }
    let caption = members.iter().map(|m| m.caption.as_str()).collect::<Vec<_>>().join("; ");
    let grouped = LayerRecord { image, rect, z: members[members.len() - 1].z, kind: LayerKind::Foreground, caption };
    let mut layers = Vec::with_capacity(design.layers.len() - members.len() + 1);
    layers.extend_from_slice(&design.layers[..lo]);
    layers.push(grouped);
    layers.extend_from_slice(&design.layers[hi + 1..]);
    Ok(LayeredDesign { layers, ..design.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px_img(px: Pixel) -> RgbaImage {
        RgbaImage::filled(1, 1, px)
    }

    #[test]
    fn opaque_foreground_wins() {
        let out = over(&px_img([1.0, 0.0, 0.0, 1.0]), &px_img([0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.get(0, 0), [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn transparent_foreground_is_identity() {
        let bg = px_img([0.1, 0.2, 0.3, 0.4]);
        assert_eq!(over(&px_img(TRANSPARENT), &bg).unwrap(), bg);
    }

    #[test]
    fn half_red_over_blue() {
        let out = over(&px_img([0.5, 0.0, 0.0, 0.5]), &px_img([0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.get(0, 0), [0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn over_rejects_mismatched_sizes() {
        assert!(matches!(
            over(&RgbaImage::transparent(2, 1), &RgbaImage::transparent(1, 2)),
            Err(Error::Dimension(_))
        ));
    }

    fn layer(rect: Rect, px: Pixel, z: i32) -> LayerRecord {
        LayerRecord {
            image: RgbaImage::filled(rect.w, rect.h, px),
            rect,
            z,
            kind: LayerKind::Foreground,
            caption: String::new(),
        }
    }

    #[test]
    fn place_single_pixel() {
        let out = place(&layer(Rect::new(0, 0, 1, 1).unwrap(), [1.0; 4], 0), 2, 2);
        assert_eq!(out.get(0, 0), [1.0; 4]);
        for (x, y) in [(1, 0), (0, 1), (1, 1)] {
            assert_eq!(out.get(x, y), TRANSPARENT);
        }
    }

    #[test]
    fn place_outside_canvas_is_transparent() {
        let out = place(&layer(Rect::new(5, 5, 3, 3).unwrap(), [1.0; 4], 0), 2, 2);
        assert!(out.is_fully_transparent());
    }

    #[test]
    fn place_clips_negative_origin() {
        let mut l = layer(Rect::new(-1, 0, 2, 1).unwrap(), [0.0; 4], 0);
        l.image.set(0, 0, [0.2, 0.0, 0.0, 0.2]);
        l.image.set(1, 0, [0.0, 0.3, 0.0, 0.3]);
        let out = place(&l, 2, 1);
        assert_eq!(out.get(0, 0), [0.0, 0.3, 0.0, 0.3]);
        assert_eq!(out.get(1, 0), TRANSPARENT);
    }

    #[test]
    fn rect_rejects_zero_extent() {
        assert!(Rect::new(0, 0, 0, 3).is_err());
    }

    #[test]
    fn crop_bounds() {
        let img = RgbaImage::filled(3, 3, [0.5; 4]);
        assert_eq!(visible_crop(&img, Rect::new(0, 0, 3, 3).unwrap()).unwrap(), img);
        assert_eq!(visible_crop(&img, Rect::new(2, 2, 1, 1).unwrap()).unwrap().pixels().len(), 1);
        assert!(matches!(visible_crop(&img, Rect::new(2, 2, 2, 1).unwrap()), Err(Error::OutOfBounds(_))));
    }

    fn two_square_design() -> LayeredDesign {
        let bg = LayerRecord {
            kind: LayerKind::Background,
            ..layer(Rect::new(0, 0, 4, 4).unwrap(), [0.0, 0.0, 0.5, 1.0], 0)
        };
        LayeredDesign {
            canvas_w: 4,
            canvas_h: 4,
            bg_rect: bg.rect,
            layers: vec![
                bg,
                layer(Rect::new(0, 0, 2, 2).unwrap(), [1.0, 0.0, 0.0, 1.0], 1),
                layer(Rect::new(2, 2, 2, 2).unwrap(), [0.0, 1.0, 0.0, 1.0], 2),
            ],
            global_caption: "two squares".into(),
        }
    }

    #[test]
    fn grouping_disjoint_squares_is_bit_identical() {
        let d = two_square_design();
        d.validate().unwrap();
        let g = group_layers(&d, &BTreeSet::from([1, 2])).unwrap();
        g.validate().unwrap();
        assert_eq!(g.k(), 1);
        assert_eq!(g.layers[1].rect, Rect::new(0, 0, 4, 4).unwrap());
        assert_eq!(g.layers[1].z, 2);
        assert_eq!(compose(&g), compose(&d));
    }

    #[test]
    fn grouping_rejects_background_and_gaps() {
        let mut d = two_square_design();
        d.layers.push(layer(Rect::new(1, 1, 1, 1).unwrap(), [0.2; 4], 3));
        assert!(group_layers(&d, &BTreeSet::from([0, 1])).is_err());
        assert!(group_layers(&d, &BTreeSet::from([1, 3])).is_err());
        assert!(group_layers(&d, &BTreeSet::new()).is_err());
    }

    #[test]
    fn canvas_layer_is_transparent_identity() {
        let d = two_square_design();
        let c = canvas_layer(&d);
        assert_eq!((c.width(), c.height()), (4, 4));
        assert!(c.is_fully_transparent());
        let mut with_canvas = d.clone();
        with_canvas.layers.insert(
            0,
            LayerRecord { image: c, rect: d.canvas_rect(), z: -1, kind: LayerKind::Foreground, caption: String::new() },
        );
        assert_eq!(compose(&with_canvas), compose(&d));
    }

    #[test]
    fn validate_catches_loose_canvas() {
        let mut d = two_square_design();
        d.canvas_w = 5;
        assert!(d.validate().is_err());
    }

    #[test]
    fn u8_round_trip() {
        for a in [0u8, 1, 37, 128, 255] {
            for c in [0u8, 13, 200, 255] {
                let px = [c, 255 - c, c / 2, a];
                let back = unpremultiply_u8(premultiply_u8(px));
                if a == 0 {
                    assert_eq!(back, [0; 4]);
                } else {
                    assert_eq!(back, px);
                }
            }
        }
    }
}
