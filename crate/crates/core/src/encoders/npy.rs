//! View images as NumPy `.npy` (format version 1.0).
//!
//! Layout: the 6-byte magic `\x93NUMPY`, version bytes `1 0`, a little-endian
//! u16 header length, an ASCII dict header
//! `{'descr': '<f8', 'fortran_order': False, 'shape': (V, 2, S, S), }`
//! space-padded and newline-terminated so the payload starts on a 64-byte
//! boundary, then V·2·S·S little-endian f64 in row-major order. Channel 0 is
//! occupancy, channel 1 is depth (empty pixels hold `radius + 1`). The far
//! value of each view is recovered from its empty pixels, or from the
//! default rig when a view is fully covered.

use std::fs;
use std::path::Path;

use super::ViewImage;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn encode_views(images: &[ViewImage]) -> Vec<u8> {
    let s = images.first().map_or(0, |i| i.size);
    let header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, 2, {s}, {s}), }}",
        images.len()
    );
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let mut h = header.into_bytes();
    h.extend(std::iter::repeat(b' ').take(pad));
    h.push(b'\n');
    let mut out = Vec::with_capacity(unpadded + pad + images.len() * 2 * s * s * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(h.len() as u16).to_le_bytes());
    out.extend_from_slice(&h);
    for img in images {
        for v in img.occupancy.iter().chain(&img.depth) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_views(bytes: &[u8], default_far: f64) -> Result<Vec<ViewImage>> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing npy magic".into()));
    }
    if bytes[6] != 1 {
        return Err(Error::Format(format!("unsupported npy version {}", bytes[6])));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| Error::Format("npy header truncated".into()))?)
        .map_err(|_| Error::Format("npy header not ascii".into()))?;
    if !header.contains("'<f8'") || !header.contains("False") {
        return Err(Error::Format(format!("unsupported npy header {header}")));
    }
    let shape_str = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Format("npy header has no shape".into()))?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad npy dim {s}"))))
        .collect::<Result<_>>()?;
    let [v, c, s, s2] = dims[..] else {
        return Err(Error::Format(format!("expected 4-d view array, got {dims:?}")));
    };
    if c != 2 || s != s2 {
        return Err(Error::Format(format!("expected (V, 2, S, S), got {dims:?}")));
    }
    let body = &bytes[10 + hlen..];
    if body.len() != v * 2 * s * s * 8 {
        return Err(Error::Format("npy payload size mismatch".into()));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(vals
        .chunks_exact(2 * s * s)
        .map(|chunk| {
            let occupancy = chunk[..s * s].to_vec();
            let depth = chunk[s * s..].to_vec();
            let far = occupancy
                .iter()
                .zip(&depth)
                .find(|(o, _)| **o == 0.0)
                .map_or(default_far, |(_, d)| *d);
            ViewImage {
                size: s,
                occupancy,
                depth,
                far,
            }
        })
        .collect())
}

pub fn write_views(path: &Path, images: &[ViewImage]) -> Result<()> {
    fs::write(path, encode_views(images)).map_err(|e| Error::io(path, e))
}

pub fn read_views(path: &Path) -> Result<Vec<ViewImage>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_views(&bytes, crate::geometry::DEFAULT_RADIUS + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_aligned_and_round_trips() {
        let mut img = ViewImage::empty(4, 3.2);
        img.occupancy[5] = 2.0;
        img.depth[5] = 1.5;
        let bytes = encode_views(&[img.clone(), ViewImage::empty(4, 3.2)]);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes[10 + hlen - 1], b'\n');
        let back = decode_views(&bytes, 9.9).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], img);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_views(b"not an npy file", 3.2).is_err());
    }
}
