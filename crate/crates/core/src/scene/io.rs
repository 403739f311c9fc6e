//! Point-cloud, label and manifest files.
//!
//! * Point cloud: `"CATP"`, version `u32`, point count `u64`, then `x, y, z, intensity`
//!   as little-endian `f32` per point.
//! * Labels: one line per box, `cx,cy,cz,l,w,h,yaw,class,score` with `class` in `{0,1,2}`.
//! * Manifest: `#`-comment lines plus one `id,cloud,labels,seed` line per scene; paths are
//!   relative to the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Box3D, ObjectClass, Point};
use crate::error::{Error, Result};

pub const POINT_FILE_MAGIC: &[u8; 4] = b"CATP";
pub const POINT_FILE_VERSION: u32 = 1;

pub fn point_cloud_bytes(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + points.len() * 16);
    out.extend_from_slice(POINT_FILE_MAGIC);
    out.extend_from_slice(&POINT_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p.features() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_point_cloud(path: &Path, points: &[Point]) -> Result<()> {
    std::fs::write(path, point_cloud_bytes(points)).map_err(|e| Error::io(path, e))
}

pub fn parse_point_cloud(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    let bad = |msg: &str| Error::format("point cloud", path, msg);
    if bytes.len() < 16 || &bytes[..4] != POINT_FILE_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != POINT_FILE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len()
        != count
            .checked_mul(16)
            .ok_or_else(|| bad("point count overflows"))?
    {
        return Err(bad(&format!(
            "expected {count} points, found {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            Point::new(f(0), f(1), f(2), f(3))
        })
        .collect())
}

pub fn read_point_cloud(path: &Path) -> Result<Vec<Point>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_point_cloud(&bytes, path)
}

/// Formats one label line; values use the shortest representation that parses back exactly.
pub fn format_label_line(b: &Box3D) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        b.cx,
        b.cy,
        b.cz,
        b.l,
        b.w,
        b.h,
        b.yaw,
        b.class.index(),
        b.score
    )
}

pub fn parse_label_line(line: &str) -> Option<Box3D> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() != 9 {
        return None;
    }
    let mut v = [0.0f64; 7];
    for (slot, f) in v.iter_mut().zip(&fields[..7]) {
        *slot = f.parse().ok()?;
    }
    let class = ObjectClass::from_index(fields[7].parse().ok()?)?;
    let score: f64 = fields[8].parse().ok()?;
    if !(v[3] > 0.0 && v[4] > 0.0 && v[5] > 0.0) {
        return None;
    }
    Some(Box3D {
        cx: v[0],
        cy: v[1],
        cz: v[2],
        l: v[3],
        w: v[4],
        h: v[5],
        yaw: v[6],
        class,
        score,
    })
}

pub fn labels_text(boxes: &[Box3D]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{}", format_label_line(b));
    }
    s
}

pub fn write_labels(path: &Path, boxes: &[Box3D]) -> Result<()> {
    std::fs::write(path, labels_text(boxes)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<Box3D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_label_line(l)
                .ok_or_else(|| Error::format("label file", path, format!("line {}: `{l}`", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub cloud: PathBuf,
    pub labels: PathBuf,
    pub seed: u64,
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# id,cloud,labels,seed\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            e.id,
            e.cloud.display(),
            e.labels.display(),
            e.seed
        );
    }
    s
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, manifest_text(entries)).map_err(|e| Error::io(path, e))
}

/// Reads a manifest. Returned paths are kept exactly as written; use
/// [`ManifestEntry::resolve`] to anchor them at the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::format("manifest", path, format!("line {}: `{line}`", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        entries.push(ManifestEntry {
            id: f[0].to_string(),
            cloud: PathBuf::from(f[1]),
            labels: PathBuf::from(f[2]),
            seed: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(entries)
}

impl ManifestEntry {
    /// Cloud and label paths anchored at `base` (the manifest's directory).
    pub fn resolve(&self, base: &Path) -> (PathBuf, PathBuf) {
        (base.join(&self.cloud), base.join(&self.labels))
    }
}
