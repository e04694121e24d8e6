//! IDX containers: big-endian `u32` magic, dimension sizes, then raw `u8`
//! payload.

use crate::error::CliError;
use revsnn_core::tensor::{Precision, Tensor};
use revsnn_core::train::Dataset;
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, CliError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CliError::Idx(format!("{what}: truncated header ({} bytes)", bytes.len())))
}

/// Images as `[n, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8], precision: Precision) -> Result<Tensor, CliError> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(CliError::Idx(format!("images: bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(CliError::Idx(format!("images: truncated payload: {} of {need} bytes", payload.len())));
    }
    let data = payload[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::from_vec(vec![n, 1, rows, cols], data, precision)?)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, CliError> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(CliError::Idx(format!("labels: bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(CliError::Idx(format!("labels: truncated payload: {} of {n} bytes", payload.len())));
    }
    Ok(payload[..n].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize, precision: Precision) -> Result<Dataset, CliError> {
    let ib = std::fs::read(images).map_err(|e| CliError::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| CliError::io(labels, e))?;
    let x = parse_images(&ib, precision)?;
    let y = parse_labels(&lb)?;
    if x.dim(0) != y.len() {
        return Err(CliError::Idx(format!("count mismatch: {} images, {} labels", x.dim(0), y.len())));
    }
    Ok(Dataset::new(x, y, num_classes)?)
}

/// Encodes the inverse of [`parse_images`] for `u8` pixels.
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_image_fixture() {
        let img = [0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 255, 51, 102];
        let t = parse_images(&img, Precision::F64).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 1]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 1]).unwrap(), vec![7, 1]);
    }

    #[test]
    fn empty_and_bad_magic() {
        assert!(matches!(parse_images(&[], Precision::F64), Err(CliError::Idx(m)) if m.contains("truncated")));
        assert!(matches!(parse_labels(&[0, 0, 8, 3, 0, 0, 0, 0]), Err(CliError::Idx(m)) if m.contains("magic")));
        assert!(parse_labels(&[0, 0, 8, 1, 0, 0, 0, 3, 1]).is_err());
    }
}
