//! Big-endian IDX image/label file parsing (the Fashion-MNIST on-disk format).

use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::data::LabeledDataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Idx(format!("truncated file at offset {offset}")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parse an IDX3 image file: magic 0x00000803, dims N x rows x cols, one byte
/// per pixel row-major, scaled to [0, 1] and flattened.
pub fn parse_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx(format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let dim = rows * cols;
    let pixels = bytes
        .get(16..16 + n * dim)
        .ok_or_else(|| Error::Idx(format!("truncated pixel data, expected {} bytes", n * dim)))?;
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        for j in 0..dim {
            out[[i, j]] = pixels[i * dim + j] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Parse an IDX1 label file: magic 0x00000801, N, one byte per label.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let data = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Idx(format!("truncated label data, expected {n} bytes")))?;
    Ok(data.iter().map(|&b| b as usize).collect())
}

/// Load a paired image/label IDX dataset from disk.
pub fn load_idx(path_images: &Path, path_labels: &Path) -> Result<LabeledDataset> {
    let mut image_bytes = Vec::new();
    std::fs::File::open(path_images)?.read_to_end(&mut image_bytes)?;
    let mut label_bytes = Vec::new();
    std::fs::File::open(path_labels)?.read_to_end(&mut label_bytes)?;
    let inputs = parse_images(&image_bytes)?;
    let labels = parse_labels(&label_bytes)?;
    if inputs.nrows() != labels.len() {
        return Err(Error::Idx(format!(
            "count mismatch: {} images vs {} labels",
            inputs.nrows(),
            labels.len()
        )));
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(inputs, labels, class_count).map_err(|e| Error::Idx(e.to_string()))
}
