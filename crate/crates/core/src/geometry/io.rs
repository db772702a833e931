//! Point-cloud files.
//!
//! `.pts`: little-endian u64 point count, then `count` triples of
//! little-endian f64 (x, y, z).
//! `.json`: an array of `[x, y, z]` arrays.
//!
//! The object id is the file stem.

use std::fs;
use std::path::Path;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let bytes = match extension(path)? {
        Format::Pts => encode_pts(&cloud.points),
        Format::Json => serde_json::to_vec(&cloud.points)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = match extension(path)? {
        Format::Pts => decode_pts(&bytes)?,
        Format::Json => serde_json::from_slice(&bytes)?,
    };
    Ok(PointCloud::new(stem(path), points))
}

enum Format {
    Pts,
    Json,
}

fn extension(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pts") => Ok(Format::Pts),
        Some("json") => Ok(Format::Json),
        other => Err(Error::Format(format!("unsupported point-cloud extension {other:?}"))),
    }
}

pub fn encode_pts(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + points.len() * 24);
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pts(bytes: &[u8]) -> Result<Vec<Point3>> {
    if bytes.len() < 8 {
        return Err(Error::Format("pts header truncated".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != n * 24 {
        return Err(Error::Format(format!("pts header says {n} points, body has {} bytes", body.len())));
    }
    Ok(body
        .chunks_exact(24)
        .map(|c| {
            let f = |k: usize| f64::from_le_bytes(c[k * 8..k * 8 + 8].try_into().unwrap());
            [f(0), f(1), f(2)]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pts_layout() {
        let bytes = encode_pts(&[[1.0, 2.0, 3.0]]);
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..8], &1u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert!(decode_pts(&bytes[..31]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new("obj7", vec![[0.1, -0.2, 0.3], [1.0, 0.0, -1.0]]);
        for ext in ["pts", "json"] {
            let path = dir.path().join(format!("obj7.{ext}"));
            write_cloud(&path, &cloud).unwrap();
            assert_eq!(read_cloud(&path).unwrap(), cloud);
        }
        assert!(write_cloud(&dir.path().join("x.bin"), &cloud).is_err());
    }
}
