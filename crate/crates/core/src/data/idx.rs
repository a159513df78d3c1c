//! The IDX container used by MNIST: big-endian `u32` magic and dimensions,
//! followed by unsigned bytes.

use std::path::Path;

use crate::error::{Error, IdxError, Result};
use crate::numerics::DenseMatrix;

use super::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const NUM_CLASSES: usize = 10;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        }
        .into());
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        }
        .into());
    }
    if bytes.len() < header_len {
        return Err(IdxError::Truncated {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        }
        .into());
    }
    Ok(())
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    check_header(path, bytes, IDX_LABELS_MAGIC, 8)?;
    let count = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(IdxError::Truncated {
            path: path.into(),
            expected: 8 + count,
            found: bytes.len(),
        }
        .into());
    }
    body[..count]
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < NUM_CLASSES {
                Ok(label as usize)
            } else {
                Err(IdxError::BadLabel {
                    path: path.into(),
                    index,
                    label,
                }
                .into())
            }
        })
        .collect()
}

fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    check_header(path, bytes, IDX_IMAGES_MAGIC, 16)?;
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        }
        .into());
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((count, dim, pixels))
}

/// Loads an image/label IDX pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, dim, pixels) = parse_images(images_path, &image_bytes)?;

    // Compare declared counts before looking at the label payload so a cut-off
    // label file is reported against the image count.
    check_header(labels_path, &label_bytes, IDX_LABELS_MAGIC, 8)?;
    let declared = be_u32(&label_bytes, 4) as usize;
    let present = label_bytes.len() - 8;
    if declared != count || present < count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: declared.min(present),
        }
        .into());
    }
    let labels = parse_labels(labels_path, &label_bytes)?;
    Dataset::new(DenseMatrix::new(count, dim, pixels)?, labels, NUM_CLASSES)
}
