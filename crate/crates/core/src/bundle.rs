//! `mrt-bundle/1` on-disk designs: a directory holding `manifest.json` and one
//! straight-alpha RGBA8 PNG per layer, named `layer_{z}.png`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canvas::{premultiply_u8, unpremultiply_u8, LayerKind, LayerRecord, LayeredDesign, Rect, RgbaImage};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT: &str = "mrt-bundle/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub bg_rect: Rect,
    pub global_caption: String,
    pub layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub file: String,
    pub rect: Rect,
    pub z: i32,
    pub kind: LayerKind,
    pub caption: String,
}

pub fn layer_file_name(z: i32) -> String {
    format!("layer_{z}.png")
}

pub fn save_design(design: &LayeredDesign, dir: &Path) -> Result<()> {
    design.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(design.layers.len());
    for l in &design.layers {
        let file = layer_file_name(l.z);
        write_png(&l.image, &dir.join(&file))?;
        layers.push(ManifestLayer { file, rect: l.rect, z: l.z, kind: l.kind, caption: l.caption.clone() });
    }
    let manifest = Manifest {
        format: BUNDLE_FORMAT.to_string(),
        canvas_w: design.canvas_w,
        canvas_h: design.canvas_h,
        bg_rect: design.bg_rect,
        global_caption: design.global_caption.clone(),
        layers,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_design(dir: &Path) -> Result<LayeredDesign> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&path)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::format(&path, format!("unsupported format {:?}", manifest.format)));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for ml in manifest.layers {
        let image = read_png(&dir.join(&ml.file))?;
        layers.push(LayerRecord { image, rect: ml.rect, z: ml.z, kind: ml.kind, caption: ml.caption });
    }
    let design = LayeredDesign {
        canvas_w: manifest.canvas_w,
        canvas_h: manifest.canvas_h,
        bg_rect: manifest.bg_rect,
        layers,
        global_caption: manifest.global_caption,
    };
    design.validate()?;
    Ok(design)
}

/// Write a premultiplied image as straight-alpha RGBA8.
pub fn write_png(img: &RgbaImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width(), img.height());
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.pixels().iter().flat_map(|p| unpremultiply_u8(*p)).collect();
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Read any 8/16-bit gray/RGB(A) PNG into a premultiplied image.
pub fn read_png(path: &Path) -> Result<RgbaImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let buf = &buf[..info.buffer_size()];
    let pixels: Vec<_> = match info.color_type {
        png::ColorType::Rgba => buf.chunks_exact(4).map(|c| premultiply_u8([c[0], c[1], c[2], c[3]])).collect(),
        png::ColorType::Rgb => buf.chunks_exact(3).map(|c| premultiply_u8([c[0], c[1], c[2], 255])).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).map(|c| premultiply_u8([c[0], c[0], c[0], c[1]])).collect(),
        png::ColorType::Grayscale => buf.iter().map(|&g| premultiply_u8([g, g, g, 255])).collect(),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    RgbaImage::from_pixels(info.width, info.height, pixels)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LayeredDesign {
        let mut bg = RgbaImage::transparent(4, 3);
        for (i, p) in bg.pixels_mut().iter_mut().enumerate() {
            *p = premultiply_u8([i as u8 * 20, 100, 7, 200]);
        }
        let fg = RgbaImage::filled(3, 3, premultiply_u8([255, 0, 10, 128]));
        LayeredDesign {
            canvas_w: 6,
            canvas_h: 3,
            bg_rect: Rect::new(0, 0, 4, 3).unwrap(),
            layers: vec![
                LayerRecord { image: bg, rect: Rect::new(0, 0, 4, 3).unwrap(), z: 0, kind: LayerKind::Background, caption: "bg".into() },
                LayerRecord { image: fg, rect: Rect::new(3, 0, 3, 3).unwrap(), z: 5, kind: LayerKind::Foreground, caption: "box".into() },
            ],
            global_caption: "demo".into(),
        }
    }

    #[test]
    fn bundle_round_trip_is_exact_for_quantized_colors() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample();
        save_design(&d, dir.path()).unwrap();
        assert!(dir.path().join("layer_5.png").exists());
        let back = load_design(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_foreign_format() {
        let dir = tempfile::tempdir().unwrap();
        save_design(&sample(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace("mrt-bundle/1", "mrt-bundle/9");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_design(dir.path()), Err(Error::Format { .. })));
    }
}
