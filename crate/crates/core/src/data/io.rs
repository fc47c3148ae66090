//! Reading and writing depth (16-bit PNG, PFM) and colour (8-bit PNG) files.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::{DepthMap, RgbImage, RgbdPair};
use crate::error::{Error, Result};

pub const COLOR_SUFFIX: &str = "_color";
pub const DEPTH_SUFFIX: &str = "_depth";

/// On-disk encoding of depth maps in a dataset directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    Png16,
    Pfm,
}

impl DepthFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DepthFormat::Png16 => "png",
            DepthFormat::Pfm => "pfm",
        }
    }
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    sixteen_bit: bool,
    bytes: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut bytes = vec![0u8; size];
    let info = reader
        .next_frame(&mut bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    bytes.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        sixteen_bit: info.bit_depth == png::BitDepth::Sixteen,
        bytes,
    })
}

impl Decoded {
    fn sample(&self, idx: usize) -> f64 {
        if self.sixteen_bit {
            u16::from_be_bytes([self.bytes[2 * idx], self.bytes[2 * idx + 1]]) as f64
        } else {
            self.bytes[idx] as f64
        }
    }

    fn max_value(&self) -> f64 {
        if self.sixteen_bit {
            65535.0
        } else {
            255.0
        }
    }
}

/// Raw stored values of a single-channel PNG (8- or 16-bit).
pub fn read_png16(path: &Path) -> Result<Array2<f64>> {
    let d = decode_png(path)?;
    if d.channels != 1 {
        return Err(Error::format(path, format!("depth PNG must be grayscale, found {} channels", d.channels)));
    }
    Ok(Array2::from_shape_fn((d.height, d.width), |(y, x)| d.sample(y * d.width + x)))
}

fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let d = decode_png(path)?;
    let max = d.max_value();
    let values = Array3::from_shape_fn((3, d.height, d.width), |(c, y, x)| {
        let base = (y * d.width + x) * d.channels;
        let ch = if d.channels < 3 { 0 } else { c };
        d.sample(base + ch) / max
    });
    RgbImage::new(values)
}

/// Writes a normalized depth map as 16-bit grayscale PNG (`v · 65535`, clamped).
pub fn write_png16(path: &Path, map: &DepthMap) -> Result<()> {
    let (h, w) = map.dims();
    let mut bytes = Vec::with_capacity(2 * h * w);
    for &v in map.values().iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w) = img.dims();
    let v = img.values();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((v[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a single-channel PFM (`Pf`) file, returning rows top to bottom.
pub fn read_pfm(path: &Path) -> Result<Array2<f64>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != "Pf" {
        return Err(Error::format(path, format!("expected single-channel 'Pf' PFM, found '{}'", fields[0])));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad PFM header field '{s}'")));
    let (w, h, scale) = (parse(&fields[1])? as usize, parse(&fields[2])? as usize, parse(&fields[3])?);
    let body = raw.get(pos..).unwrap_or_default();
    if body.len() < 4 * w * h {
        return Err(Error::format(path, "truncated PFM raster"));
    }
    let little = scale < 0.0;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        // PFM stores the bottom row first
        let i = 4 * ((h - 1 - y) * w + x);
        let b = [body[i], body[i + 1], body[i + 2], body[i + 3]];
        (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
    }))
}

/// Writes a little-endian single-channel PFM.
pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    let (h, w) = map.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    let v = map.values();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(v[[y, x]] as f32).to_le_bytes());
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a normalized depth map: PNG values are divided by 65535 (or 255),
/// PFM values are taken as stored.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    match extension(path).as_deref() {
        Some("pfm") => DepthMap::new(read_pfm(path)?),
        Some("png") => {
            let d = decode_png(path)?;
            if d.channels != 1 {
                return Err(Error::format(path, "depth PNG must be grayscale"));
            }
            let max = d.max_value();
            DepthMap::new(Array2::from_shape_fn((d.height, d.width), |(y, x)| d.sample(y * d.width + x) / max))
        }
        _ => Err(Error::format(path, "depth files must end in .png or .pfm")),
    }
}

/// Writes a depth map in the format implied by the file extension.
pub fn write_depth(path: &Path, map: &DepthMap) -> Result<()> {
    match extension(path).as_deref() {
        Some("pfm") => write_pfm(path, map),
        Some("png") => write_png16(path, map),
        _ => Err(Error::format(path, "depth files must end in .png or .pfm")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

/// Replaces invalid pixels (zero or non-finite) with the value of the
/// nearest valid pixel in 4-connected breadth-first order.
fn fill_invalid(raw: &mut Array2<f64>) -> bool {
    let (h, w) = raw.dim();
    let valid = |v: f64| v.is_finite() && v > 0.0;
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for ((y, x), &v) in raw.indexed_iter() {
        if valid(v) {
            seen[[y, x]] = true;
            queue.push_back((y, x));
        }
    }
    if queue.is_empty() {
        return false;
    }
    while let Some((y, x)) = queue.pop_front() {
        let v = raw[[y, x]];
        let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (ny, nx) in neighbours {
            if ny < h && nx < w && !seen[[ny, nx]] {
                seen[[ny, nx]] = true;
                raw[[ny, nx]] = v;
                queue.push_back((ny, nx));
            }
        }
    }
    true
}

/// Loads every `<stem>_color.png` / `<stem>_depth.<ext>` pair in `dir`,
/// sorted by stem. Depth is hole-filled and divided by the largest raw
/// depth value across the whole directory.
pub fn load_rgbd_pairs(dir: &Path, format: DepthFormat) -> Result<Vec<RgbdPair>> {
    let depth_ext = format.extension();
    let mut colors: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut depths: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem().map(|s| s.to_string_lossy().into_owned()), extension(&path)) else {
            continue;
        };
        if let Some(base) = stem.strip_suffix(COLOR_SUFFIX) {
            if ext == "png" {
                colors.insert(base.to_string(), path.clone());
            }
        } else if let Some(base) = stem.strip_suffix(DEPTH_SUFFIX) {
            if ext == depth_ext {
                depths.insert(base.to_string(), path.clone());
            }
        }
    }
    for (stem, path) in &colors {
        if !depths.contains_key(stem) {
            return Err(Error::Orphan {
                orphan: path.clone(),
                missing: format!("{stem}{DEPTH_SUFFIX}.{depth_ext}"),
            });
        }
    }
    for (stem, path) in &depths {
        if !colors.contains_key(stem) {
            return Err(Error::Orphan {
                orphan: path.clone(),
                missing: format!("{stem}{COLOR_SUFFIX}.png"),
            });
        }
    }

    let mut raw_pairs = Vec::with_capacity(colors.len());
    let mut dataset_max = 0.0f64;
    for (stem, color_path) in &colors {
        let depth_path = &depths[stem];
        let rgb = read_png_rgb(color_path)?;
        let mut raw = match format {
            DepthFormat::Png16 => read_png16(depth_path)?,
            DepthFormat::Pfm => read_pfm(depth_path)?,
        };
        if raw.dim() != rgb.dims() {
            return Err(Error::Dimension(format!(
                "{}: depth {:?} does not match colour {:?}",
                stem,
                raw.dim(),
                rgb.dims()
            )));
        }
        if !fill_invalid(&mut raw) {
            return Err(Error::format(depth_path, "depth map has no valid pixels"));
        }
        dataset_max = raw.iter().copied().fold(dataset_max, f64::max);
        raw_pairs.push((stem.clone(), rgb, raw));
    }
    raw_pairs
        .into_iter()
        .map(|(name, rgb, raw)| {
            Ok(RgbdPair {
                name,
                rgb,
                depth: DepthMap::new(raw / dataset_max)?,
            })
        })
        .collect()
}
