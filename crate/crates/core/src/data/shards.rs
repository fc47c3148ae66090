//! Binary sample shards plus a JSON manifest with SHA-256 checksums.
//!
//! Shard layout (all integers little-endian `u32`, rasters little-endian
//! `f32` in row-major order):
//!
//! ```text
//! magic   b"CXDSHARD"
//! version 1
//! count   number of samples
//! per sample:
//!   scale, hr_height, hr_width
//!   origin_len, origin (UTF-8 JSON of PatchOrigin)
//!   d_lr  [hr_height/scale × hr_width/scale]
//!   d_hr  [hr_height × hr_width]
//!   rgb   [3 × hr_height × hr_width]
//!   s_gt  [hr_height × hr_width]
//! ```

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DepthMap, PatchOrigin, RgbImage, Scale, StructureMap, TrainingSample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CXDSHARD";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "crossdsr-shards/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format: String,
    pub scale: Scale,
    pub patch_size: usize,
    pub count: usize,
    pub seed: u64,
    pub source: String,
    pub shards: Vec<ShardEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_raster<'a>(buf: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_shard(samples: &[TrainingSample]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, samples.len());
    for s in samples {
        let (h, w) = s.d_hr.dims();
        put_u32(&mut buf, s.scale.factor());
        put_u32(&mut buf, h);
        put_u32(&mut buf, w);
        let origin = serde_json::to_vec(&s.origin).expect("origin serializes");
        put_u32(&mut buf, origin.len());
        buf.extend_from_slice(&origin);
        put_raster(&mut buf, s.d_lr.values().iter());
        put_raster(&mut buf, s.d_hr.values().iter());
        put_raster(&mut buf, s.rgb.values().iter());
        put_raster(&mut buf, s.s_gt.values().iter());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated shard"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub fn decode_shard(bytes: &[u8], path: &Path) -> Result<Vec<TrainingSample>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(8)? != MAGIC {
        return Err(Error::format(path, "not a sample shard"));
    }
    let version = cur.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported shard version {version}")));
    }
    let count = cur.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let scale = Scale::try_from(cur.u32()? as u32)?;
        let (h, w) = (cur.u32()?, cur.u32()?);
        let s = scale.factor();
        let origin_len = cur.u32()?;
        let origin: PatchOrigin = serde_json::from_slice(cur.take(origin_len)?)
            .map_err(|e| Error::format(path, format!("bad sample origin: {e}")))?;
        let shape_err = |_| Error::format(path, "raster shape");
        let d_lr = Array2::from_shape_vec((h / s, w / s), cur.floats(h / s * (w / s))?).map_err(shape_err)?;
        let d_hr = Array2::from_shape_vec((h, w), cur.floats(h * w)?).map_err(shape_err)?;
        let rgb = Array3::from_shape_vec((3, h, w), cur.floats(3 * h * w)?).map_err(shape_err)?;
        let s_gt = Array2::from_shape_vec((h, w), cur.floats(h * w)?).map_err(shape_err)?;
        out.push(TrainingSample::new(
            DepthMap::new(d_lr)?,
            DepthMap::new(d_hr)?,
            RgbImage::new(rgb)?,
            StructureMap::new(s_gt),
            scale,
            origin,
        )?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last sample"));
    }
    Ok(out)
}

/// Writes `samples` as shards of at most `per_shard` samples plus the manifest.
pub fn write_shards(
    dir: &Path,
    samples: &[TrainingSample],
    per_shard: usize,
    mut manifest: ShardManifest,
) -> Result<ShardManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.shards.clear();
    manifest.count = samples.len();
    manifest.format = FORMAT_TAG.to_string();
    for (i, chunk) in samples.chunks(per_shard.max(1)).enumerate() {
        let bytes = encode_shard(chunk);
        let file = format!("shard-{i:05}.bin");
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.shards.push(ShardEntry {
            file,
            samples: chunk.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads every shard listed in `dir/manifest.json`, verifying checksums.
pub fn read_shards(dir: &Path) -> Result<(ShardManifest, Vec<TrainingSample>)> {
    let path = dir.join(MANIFEST_FILE);
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ShardManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::format(&path, format!("unknown shard format '{}'", manifest.format)));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for entry in &manifest.shards {
        let shard_path = dir.join(&entry.file);
        let bytes = std::fs::read(&shard_path).map_err(|e| Error::io(&shard_path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::format(&shard_path, "checksum mismatch"));
        }
        let decoded = decode_shard(&bytes, &shard_path)?;
        if decoded.len() != entry.samples {
            return Err(Error::format(&shard_path, "sample count disagrees with manifest"));
        }
        samples.extend(decoded);
    }
    Ok((manifest, samples))
}
