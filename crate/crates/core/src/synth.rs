//! Procedural layered designs.
//!
//! All geometry is integer and every color comes from an integer RNG draw
//! quantized to 8 bits, so a `(seed, params)` pair yields the same design on
//! every platform. Each sample in a dataset is seeded independently from
//! `(dataset_seed, index)`, which makes generation embarrassingly parallel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{save_design, write_json};
use crate::canvas::{premultiply_u8, LayerKind, LayerRecord, LayeredDesign, Rect, RgbaImage};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    SolidRect,
    Circle,
    Ring,
    GradientBand,
    GlyphStrip,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::SolidRect, Shape::Circle, Shape::Ring, Shape::GradientBand, Shape::GlyphStrip];

    fn noun(self) -> &'static str {
        match self {
            Shape::SolidRect => "rectangle",
            Shape::Circle => "circle",
            Shape::Ring => "ring",
            Shape::GradientBand => "gradient band",
            Shape::GlyphStrip => "text strip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    Short,
    Long,
    /// Short with probability 1/2, otherwise long.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    /// Inclusive range for the visible (background) width and height.
    pub canvas_min: u32,
    pub canvas_max: u32,
    /// Inclusive range for the number of foreground layers.
    pub layers_min: u32,
    pub layers_max: u32,
    pub overflow_prob: f64,
    pub shapes: Vec<Shape>,
    pub caption_mode: CaptionMode,
    /// Smallest and largest layer side as a fraction of the visible side.
    pub size_min: f64,
    pub size_max: f64,
    /// Snap the visible region to this grid (1 disables snapping).
    pub align: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            canvas_min: 64,
            canvas_max: 128,
            layers_min: 4,
            layers_max: 31,
            overflow_prob: 0.6,
            shapes: Shape::ALL.to_vec(),
            caption_mode: CaptionMode::Mixed,
            size_min: 0.08,
            size_max: 0.4,
            align: 8,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gen params: {m}")));
        if self.canvas_min < 4 || self.canvas_min > self.canvas_max {
            return bad("canvas range must satisfy 4 <= min <= max");
        }
        if self.layers_min > self.layers_max {
            return bad("layer range is empty");
        }
        if !(0.0..=1.0).contains(&self.overflow_prob) {
            return bad("overflow_prob must lie in [0, 1]");
        }
        if self.shapes.is_empty() {
            return bad("shape vocabulary is empty");
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max <= 1.0) {
            return bad("size fractions must satisfy 0 < min <= max <= 1");
        }
        if self.align == 0 || self.align > self.canvas_min {
            return bad("align must lie in [1, canvas_min]");
        }
        Ok(())
    }

    pub fn with_layers(mut self, lo: u32, hi: u32) -> Self {
        self.layers_min = lo;
        self.layers_max = hi;
        self
    }
}

/// Ground-truth layout: the background followed by foregrounds in z order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub entries: Vec<LayoutEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutEntry {
    pub rect: Rect,
    pub z: i32,
    pub kind: LayerKind,
    #[serde(default)]
    pub caption: String,
}

impl Layout {
    pub fn bg_rect(&self) -> Rect {
        self.entries[0].rect
    }

    pub fn k(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDesign(format!("layout: {m}")));
        match self.entries.first() {
            Some(e) if e.kind == LayerKind::Background => {}
            _ => return bad("first entry must be the background".into()),
        }
        if self.entries[1..].iter().any(|e| e.kind != LayerKind::Foreground) {
            return bad("only the first entry may be a background".into());
        }
        if self.entries.windows(2).any(|w| w[1].z <= w[0].z) {
            return bad("z must be strictly increasing".into());
        }
        let canvas = Rect { x: 0, y: 0, w: self.canvas_w, h: self.canvas_h };
        if self.canvas_w == 0 || self.canvas_h == 0 {
            return bad("empty canvas".into());
        }
        for e in &self.entries {
            if e.rect.w == 0 || e.rect.h == 0 || !canvas.contains(&e.rect) {
                return bad(format!("rect {:?} is empty or outside the canvas", e.rect));
            }
        }
        Ok(())
    }
}

pub fn derive_layout(design: &LayeredDesign) -> Layout {
    Layout {
        canvas_w: design.canvas_w,
        canvas_h: design.canvas_h,
        entries: design
            .layers
            .iter()
            .map(|l| LayoutEntry { rect: l.rect, z: l.z, kind: l.kind, caption: l.caption.clone() })
            .collect(),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-sample seed derived from the dataset seed and the sample index.
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(dataset_seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

const PALETTE: [(&str, [u8; 3]); 12] = [
    ("red", [220, 40, 40]),
    ("orange", [240, 140, 30]),
    ("yellow", [245, 215, 50]),
    ("green", [50, 170, 70]),
    ("teal", [30, 150, 150]),
    ("blue", [40, 80, 210]),
    ("purple", [130, 60, 180]),
    ("pink", [240, 120, 180]),
    ("white", [245, 245, 245]),
    ("black", [20, 20, 20]),
    ("gray", [128, 128, 128]),
    ("brown", [120, 75, 40]),
];

fn draw_color(rng: &mut ChaCha8Rng) -> (&'static str, [u8; 3]) {
    let (name, base) = PALETTE[rng.random_range(0..PALETTE.len())];
    let mut c = base;
    for v in &mut c {
        *v = (*v as i32 + rng.random_range(-12..=12)).clamp(0, 255) as u8;
    }
    (name, c)
}

fn position_bucket(rect: Rect, bg: Rect) -> &'static str {
    let cx = 2 * rect.x as i64 + rect.w as i64 - 2 * bg.x as i64;
    let cy = 2 * rect.y as i64 + rect.h as i64 - 2 * bg.y as i64;
    let col = (3 * cx).div_euclid(2 * bg.w as i64).clamp(0, 2);
    let row = (3 * cy).div_euclid(2 * bg.h as i64).clamp(0, 2);
    const NAMES: [[&str; 3]; 3] = [
        ["top left", "top center", "top right"],
        ["middle left", "center", "middle right"],
        ["bottom left", "bottom center", "bottom right"],
    ];
    NAMES[row as usize][col as usize]
}

fn overflow_edges(rect: Rect, bg: Rect) -> Vec<&'static str> {
    let mut e = Vec::new();
    if rect.x < bg.x {
        e.push("left");
    }
    if rect.right() > bg.right() {
        e.push("right");
    }
    if rect.y < bg.y {
        e.push("top");
    }
    if rect.bottom() > bg.bottom() {
        e.push("bottom");
    }
    e
}

/// Render a shape into a `w x h` straight-alpha RGBA8 buffer.
fn render_shape(shape: Shape, w: u32, h: u32, c1: [u8; 3], c2: [u8; 3], alpha: u8, rng: &mut ChaCha8Rng) -> Vec<[u8; 4]> {
    let (wi, hi) = (w as i64, h as i64);
    let mut out = vec![[0u8; 4]; (w * h) as usize];
    let inside_ellipse = |x: i64, y: i64, scale_num: i64, scale_den: i64| {
        // ((2x+1-w)/w)^2 + ((2y+1-h)/h)^2 <= (num/den)^2, cleared of fractions
        let dx = (2 * x + 1 - wi) * hi * scale_den;
        let dy = (2 * y + 1 - hi) * wi * scale_den;
        let r = wi * hi * scale_num;
        dx * dx + dy * dy <= r * r
    };
    // glyph strip: cells of a monospaced 3x3 block font, one random glyph per cell
    let glyph_cell = (h / 3).max(1) as i64;
    let glyphs: Vec<u16> = (0..(wi / (3 * glyph_cell) + 1)).map(|_| rng.random_range(1..512u16)).collect();
    for y in 0..hi {
        for x in 0..wi {
            let px = match shape {
                Shape::SolidRect => Some(c1),
                Shape::Circle => inside_ellipse(x, y, 1, 1).then_some(c1),
                Shape::Ring => (inside_ellipse(x, y, 1, 1) && !inside_ellipse(x, y, 3, 5)).then_some(c1),
                Shape::GradientBand => {
                    let d = (wi - 1).max(1);
                    let mix = |a: u8, b: u8| ((a as i64 * (d - x) + b as i64 * x) / d) as u8;
                    Some([mix(c1[0], c2[0]), mix(c1[1], c2[1]), mix(c1[2], c2[2])])
                }
                Shape::GlyphStrip => {
                    let g = (x / (3 * glyph_cell)) as usize;
                    let gx = (x / glyph_cell) % 3;
                    let gy = (y / glyph_cell).min(2);
                    let bit = (glyphs[g] >> (gy * 3 + gx)) & 1;
                    (bit == 1).then_some(c1)
                }
            };
            if let Some(c) = px {
                out[(y * wi + x) as usize] = [c[0], c[1], c[2], alpha];
            }
        }
    }
    out
}

fn to_image(w: u32, h: u32, buf: &[[u8; 4]]) -> RgbaImage {
    RgbaImage::from_pixels(w, h, buf.iter().map(|&p| premultiply_u8(p)).collect()).expect("buffer sized from w*h")
}

fn scaled(side: u32, frac: f64) -> u32 {
    ((side as f64 * frac).round() as u32).max(2)
}

/// Generate one design. A pure function of `(seed, params)`.
pub fn gen_design(seed: u64, params: &GenParams) -> Result<LayeredDesign> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = params.align;
    let bw = rng.random_range(params.canvas_min..=params.canvas_max) / a * a;
    let bh = rng.random_range(params.canvas_min..=params.canvas_max) / a * a;
    let bg_rect = Rect { x: 0, y: 0, w: bw, h: bh };
    let k = rng.random_range(params.layers_min..=params.layers_max) as usize;
    let overflow = rng.random_bool(params.overflow_prob) && k > 0;
    let n_over = if overflow { rng.random_range(1..=k.min(3)) } else { 0 };

    // Size fractions are drawn on an integer grid of 1/1000 steps.
    let lo = (params.size_min * 1000.0).round() as u32;
    let hi = (params.size_max * 1000.0).round() as u32;
    let frac = |rng: &mut ChaCha8Rng| {
        // squared uniform skews toward small elements
        let u = rng.random_range(0..=1000u32) as f64 / 1000.0;
        (lo as f64 + (hi - lo) as f64 * u * u) / 1000.0
    };

    let (bg_name, bg_c1) = draw_color(&mut rng);
    let (_, bg_c2) = draw_color(&mut rng);
    let bg_alpha = if rng.random_bool(0.8) { 255 } else { rng.random_range(180..=254u8) };
    let bg_shape = if rng.random_bool(0.5) { Shape::SolidRect } else { Shape::GradientBand };
    let bg_buf = render_shape(bg_shape, bw, bh, bg_c1, bg_c2, bg_alpha, &mut rng);
    let mut layers = vec![LayerRecord {
        image: to_image(bw, bh, &bg_buf),
        rect: bg_rect,
        z: 0,
        kind: LayerKind::Background,
        caption: format!("{bg_name} background"),
    }];

    // Which foregrounds overflow: the first n_over of a seeded shuffle.
    let mut order: Vec<usize> = (0..k).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let overflowing: Vec<bool> = {
        let mut v = vec![false; k];
        for &i in order.iter().take(n_over) {
            v[i] = true;
        }
        v
    };

    for (i, &over_edge) in overflowing.iter().enumerate() {
        let shape = params.shapes[rng.random_range(0..params.shapes.len())];
        let mut w = scaled(bw, frac(&mut rng)).min(bw);
        let mut h = scaled(bh, frac(&mut rng)).min(bh);
        if shape == Shape::GlyphStrip {
            w = (w * 2).min(bw);
            h = (h / 2).max(3);
        }
        let mut x = rng.random_range(0..=(bw - w)) as i32;
        let mut y = rng.random_range(0..=(bh - h)) as i32;
        if over_edge {
            // push 25%..75% of the element past one edge
            let edge = rng.random_range(0..4u8);
            let pct = rng.random_range(25..=75i32);
            match edge {
                0 => x = -(w as i32 * pct / 100).max(1),
                1 => x = bw as i32 - w as i32 + (w as i32 * pct / 100).max(1),
                2 => y = -(h as i32 * pct / 100).max(1),
                _ => y = bh as i32 - h as i32 + (h as i32 * pct / 100).max(1),
            }
        }
        let rect = Rect { x, y, w, h };
        let (cname, c1) = draw_color(&mut rng);
        let (_, c2) = draw_color(&mut rng);
        let alpha = if rng.random_bool(0.75) { 255 } else { rng.random_range(128..=230u8) };
        let buf = render_shape(shape, w, h, c1, c2, alpha, &mut rng);
        let mut caption = format!("{cname} {} at the {}", shape.noun(), position_bucket(rect, bg_rect));
        let edges = overflow_edges(rect, bg_rect);
        if !edges.is_empty() {
            caption.push_str(&format!(", overflowing the {} edge", edges.join(" and ")));
        }
        layers.push(LayerRecord {
            image: to_image(w, h, &buf),
            rect,
            z: i as i32 + 1,
            kind: LayerKind::Foreground,
            caption,
        });
    }

    // Re-root so the canvas is the tight container of all content.
    let union = layers.iter().fold(bg_rect, |u, l| u.union(&l.rect));
    for l in &mut layers {
        l.rect = l.rect.translate(-union.x, -union.y);
    }
    let mut design = LayeredDesign {
        canvas_w: union.w,
        canvas_h: union.h,
        bg_rect: layers[0].rect,
        layers,
        global_caption: String::new(),
    };
    let mode = match params.caption_mode {
        CaptionMode::Mixed => {
            if rng.random_bool(0.5) {
                CaptionMode::Short
            } else {
                CaptionMode::Long
            }
        }
        m => m,
    };
    design.global_caption = global_caption(&design, mode);
    design.validate()?;
    Ok(design)
}

/// Template caption for the whole design. `Mixed` is treated as `Short`;
/// the generator resolves it per sample.
pub fn global_caption(design: &LayeredDesign, mode: CaptionMode) -> String {
    let bg = &design.background().caption;
    let k = design.k();
    match mode {
        CaptionMode::Short | CaptionMode::Mixed => {
            let mut s = format!("A design on a {bg} with {k} layers");
            if let Some(top) = design.foregrounds().last() {
                let lead = top.caption.split(',').next().unwrap_or_default();
                let candidate = format!("{s}, topped by a {lead}");
                if candidate.len() < 199 {
                    s = candidate;
                }
            }
            s.push('.');
            s
        }
        CaptionMode::Long => {
            let mut s = format!("A layered design on a {bg} with {k} foreground layers.");
            for (i, l) in design.foregrounds().iter().enumerate() {
                s.push_str(&format!(" Layer {}: {}.", i + 1, l.caption));
            }
            s
        }
    }
}

/// Whether the long-caption template was used.
pub fn is_long_caption(caption: &str) -> bool {
    caption.starts_with("A layered design")
}

pub fn has_overflow(design: &LayeredDesign) -> bool {
    design.foregrounds().iter().any(|l| !design.bg_rect.contains(&l.rect))
}

/// Procedural restyle of a layer: hue rotation by a multiple of 120 degrees
/// (a channel cycle, so it is exact in 8 bits) plus a checker texture that
/// darkens alternate 2x2 blocks. Alpha is untouched.
pub fn restyle(img: &RgbaImage, rng: &mut impl Rng) -> RgbaImage {
    let shift = rng.random_range(1..=2usize);
    let dark = rng.random_range(60..=90u32) as f32 / 100.0;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.get(x, y);
            let k = if ((x / 2) + (y / 2)) % 2 == 0 { 1.0 } else { dark };
            let rgb = [p[0], p[1], p[2]];
            out.set(x, y, [rgb[shift % 3] * k, rgb[(1 + shift) % 3] * k, rgb[(2 + shift) % 3] * k, p[3]]);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub seed: u64,
    pub count: usize,
    pub params: GenParams,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub seed: u64,
    pub layers: usize,
    pub overflow: bool,
    pub long_caption: bool,
}

pub const DATASET_FORMAT: &str = "mrt-dataset/1";
pub const DATASET_INDEX: &str = "dataset.json";

pub fn gen_dataset(seed: u64, count: usize, params: &GenParams) -> Result<Vec<LayeredDesign>> {
    params.validate()?;
    exec::try_map(count, |i| gen_design(sample_seed(seed, i as u64), params))
}

pub fn design_dir_name(i: usize) -> String {
    format!("design_{i:05}")
}

/// Write a generated dataset as bundles plus a `dataset.json` index.
pub fn write_dataset(out: &Path, seed: u64, designs: &[LayeredDesign], params: &GenParams) -> Result<DatasetIndex> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    exec::try_map(designs.len(), |i| save_design(&designs[i], &out.join(design_dir_name(i))))?;
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        seed,
        count: designs.len(),
        params: params.clone(),
        entries: designs
            .iter()
            .enumerate()
            .map(|(i, d)| DatasetEntry {
                dir: design_dir_name(i),
                seed: sample_seed(seed, i as u64),
                layers: d.k(),
                overflow: has_overflow(d),
                long_caption: is_long_caption(&d.global_caption),
            })
            .collect(),
    };
    write_json(&out.join(DATASET_INDEX), &index)?;
    Ok(index)
}

/// Load every design listed in `dir/dataset.json`, or, when no index exists,
/// every bundle directory directly under `dir` in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<LayeredDesign>> {
    let index_path = dir.join(DATASET_INDEX);
    let dirs: Vec<std::path::PathBuf> = if index_path.exists() {
        let index: DatasetIndex = crate::bundle::read_json(&index_path)?;
        if index.format != DATASET_FORMAT {
            return Err(Error::format(&index_path, format!("unsupported format {:?}", index.format)));
        }
        index.entries.iter().map(|e| dir.join(&e.dir)).collect()
    } else {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(crate::bundle::MANIFEST).exists())
            .collect();
        v.sort();
        v
    };
    exec::try_map(dirs.len(), |i| crate::bundle::load_design(&dirs[i]))
}
