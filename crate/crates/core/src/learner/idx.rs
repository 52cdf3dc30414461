//! MNIST IDX files: a big-endian magic number, big-endian `u32` dimensions,
//! then unsigned bytes.

use std::path::Path;

use super::{Dataset, LearnerError};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw image block of an IDX3 file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, LearnerError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(LearnerError::Truncated { what, expected: at + 4, found: bytes.len() })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, LearnerError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(LearnerError::BadMagic { what: "images", expected: IMAGE_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(LearnerError::Truncated { what: "images", expected, found: bytes.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..expected].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, LearnerError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(LearnerError::BadMagic { what: "labels", expected: LABEL_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(LearnerError::Truncated { what: "labels", expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, LearnerError> {
    std::fs::read(path).map_err(|source| LearnerError::Io { path: path.display().to_string(), source })
}

/// Loads an image/label IDX pair. Pixels are scaled by 1/255 and the class
/// count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, LearnerError> {
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if images.count != labels.len() {
        return Err(LearnerError::CountMismatch { images: images.count, labels: labels.len() });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as u32 + 1);
    let features = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        features,
        labels.into_iter().map(u32::from).collect(),
        images.rows * images.cols,
        classes,
    )
}
