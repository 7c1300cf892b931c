//! On-disk datasets: PNG images plus a JSON-lines manifest
//! (`{"image": "images/00000.png", "boxes": [[x1, y1, x2, y2], ...]}`).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SyntheticScene;
use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
}

/// Reads an 8-bit PNG (gray, gray+alpha, RGB or RGBA) into a `[3, H, W]`
/// tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let png_err = |e: png::DecodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Png(format!("{}: unexpanded palette image", path.display())))
        }
    };
    let stride = info.line_size;
    let data = Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        let src = if channels < 3 { 0 } else { c };
        buf[y * stride + x * channels + src] as f32 / 255.0
    });
    Ok(data)
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an RGB8 PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut bytes = vec![0u8; h * w * 3];
    for (i, px) in bytes.iter_mut().enumerate() {
        let ch = i % 3;
        let p = i / 3;
        let v = image.data()[ch * h * w + p];
        *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn image_name(index: usize) -> String {
    format!("images/{index:05}.png")
}

/// Writes `scenes` under `dir` (created if needed) and returns the manifest path.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join(MANIFEST);
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for (i, scene) in scenes.iter().enumerate() {
        let rel = image_name(i);
        write_png(&dir.join(&rel), &scene.image)?;
        let record = ManifestRecord {
            image: rel,
            boxes: scene.gt_boxes.iter().map(BBox::to_array).collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads the manifest only, validating every record.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let manifest = dir.join(MANIFEST);
    let file = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ingest = |msg: String| Error::Ingest {
            path: manifest.clone(),
            line: line_no,
            msg,
        };
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| ingest(format!("malformed record: {e}")))?;
        for b in &record.boxes {
            BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| ingest(e.to_string()))?;
        }
        if !dir.join(&record.image).is_file() {
            return Err(ingest(format!("missing image {}", record.image)));
        }
        records.push(record);
    }
    Ok(records)
}

/// Loads a whole dataset into memory. Scene seeds are the manifest indices.
pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    read_manifest(dir)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let image = read_png(&dir.join(&r.image))?;
            let gt_boxes = r
                .boxes
                .iter()
                .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
                .collect::<Result<_>>()?;
            Ok(SyntheticScene {
                image,
                gt_boxes,
                seed: i as u64,
            })
        })
        .collect()
}
