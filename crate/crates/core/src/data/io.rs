//! On-disk dataset layout.
//!
//! ```text
//! <dir>/meta.json            split, domain, count
//! <dir>/annotations.jsonl    {"file": "00000.png", "domain": 0, "boxes": [[x1,y1,x2,y2,cls], ...]}
//! <dir>/sidecar.jsonl        same record shape; target-train labels only
//! <dir>/00000.png            8-bit RGB raster
//! <dir>/00000.depth          "DPT1", u32 width, u32 height, f32 little-endian samples
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::LabelSidecar;
use super::types::{AnnotatedImage, Annotation, BoundingBox, ClassLabel, Dataset, DomainTag, Split};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SIDECAR_FILE: &str = "sidecar.jsonl";
pub const META_FILE: &str = "meta.json";
const DEPTH_MAGIC: &[u8; 4] = b"DPT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub file: String,
    pub domain: DomainTag,
    pub boxes: Vec<[f64; 5]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    split: Split,
    domain: DomainTag,
    count: usize,
}

fn to_records(anns: &[Annotation]) -> Vec<[f64; 5]> {
    anns.iter()
        .map(|a| [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2, a.label.0 as f64])
        .collect()
}

fn from_record(b: &[f64; 5]) -> std::result::Result<Annotation, String> {
    let bbox = BoundingBox::new(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string())?;
    let cls = b[4];
    if !(cls >= 0.0 && cls.fract() == 0.0) {
        return Err(format!("class must be a nonnegative integer, got {cls}"));
    }
    Ok(Annotation { bbox, label: ClassLabel(cls as usize) })
}

fn image_stem(i: usize) -> String {
    format!("{i:05}")
}

pub fn write_png(path: &Path, img: &AnnotatedImage) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

/// Returns `(width, height, pixels)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("{}: expected 8-bit RGB", path.display())));
    }
    let pixels = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((info.width as usize, info.height as usize, pixels))
}

fn write_depth(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    for v in depth {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_depth(path: &Path, width: usize, height: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Image(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(bad("not a depth map"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if w != width || h != height || bytes.len() != 12 + 4 * w * h {
        return Err(bad("depth map size does not match image"));
    }
    Ok(bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_records(path: &Path, items: &[AnnotatedImage], labels: impl Fn(usize) -> Vec<[f64; 5]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, item) in items.iter().enumerate() {
        let rec = AnnotationRecord {
            file: format!("{}.png", image_stem(i)),
            domain: item.domain,
            boxes: labels(i),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a record file, reporting the first malformed line (1-based).
pub fn read_records(path: &Path) -> Result<Vec<(AnnotationRecord, Vec<Annotation>)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRecord { path: path.to_path_buf(), line: i + 1, message };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let anns = rec.boxes.iter().map(from_record).collect::<std::result::Result<Vec<_>, _>>().map_err(malformed)?;
        out.push((rec, anns));
    }
    Ok(out)
}

fn write_items(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta { split: ds.split, domain: ds.domain, count: ds.len() };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    for (i, item) in ds.items.iter().enumerate() {
        write_png(&dir.join(format!("{}.png", image_stem(i))), item)?;
        if let Some(d) = &item.depth {
            write_depth(&dir.join(format!("{}.depth", image_stem(i))), item.width, item.height, d)?;
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    write_items(ds, dir)?;
    write_records(&dir.join(ANNOTATIONS_FILE), &ds.items, |i| to_records(&ds.items[i].annotations))
}

/// Saves unlabeled target images; the labels go to a separate sidecar file.
pub fn save_dataset_with_sidecar(ds: &Dataset, sidecar: &LabelSidecar, dir: &Path) -> Result<()> {
    if sidecar.labels.len() != ds.len() {
        return Err(Error::ShapeMismatch("sidecar length differs from dataset".into()));
    }
    write_items(ds, dir)?;
    write_records(&dir.join(ANNOTATIONS_FILE), &ds.items, |_| Vec::new())?;
    write_records(&dir.join(SIDECAR_FILE), &ds.items, |i| to_records(&sidecar.labels[i]))
}

/// Loads images and the annotations in `annotations.jsonl`. Never reads the sidecar.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    let records = read_records(&dir.join(ANNOTATIONS_FILE))?;
    if records.len() != meta.count {
        return Err(Error::ShapeMismatch(format!("{}: {} records, meta says {}", dir.display(), records.len(), meta.count)));
    }
    let mut items = Vec::with_capacity(records.len());
    for (rec, annotations) in records {
        let png_path = dir.join(&rec.file);
        let (width, height, pixels) = read_png(&png_path)?;
        let depth_path = png_path.with_extension("depth");
        let depth = if depth_path.exists() { Some(read_depth(&depth_path, width, height)?) } else { None };
        items.push(AnnotatedImage { width, height, pixels, annotations, domain: rec.domain, depth });
    }
    let ds = Dataset { items, split: meta.split, domain: meta.domain };
    ds.check_invariants()?;
    Ok(ds)
}

pub fn load_sidecar(dir: &Path) -> Result<LabelSidecar> {
    let records = read_records(&dir.join(SIDECAR_FILE))?;
    Ok(LabelSidecar { labels: records.into_iter().map(|(_, a)| a).collect() })
}
