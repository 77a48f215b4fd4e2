//! IDX ubyte files (the MNIST container): big-endian `u32` magic, big-endian
//! `u32` dimension sizes, then the unsigned byte payload.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// A parsed IDX ubyte tensor: item count, per-item shape and payload.
#[derive(Debug, Clone, PartialEq)]
struct IdxTensor {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated header while reading {what}")))
}

fn parse_tensor(bytes: &[u8], magic: u32, kind: &str) -> Result<IdxTensor> {
    let found = read_u32(bytes, 0, "magic number")?;
    if found != magic {
        return Err(Error::Idx(format!(
            "{kind}: magic number mismatch: expected {magic:#010x}, found {found:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|k| read_u32(bytes, 4 + 4 * k, "dimension size").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = dims.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() < expected {
        return Err(Error::Idx(format!(
            "{kind}: truncated payload: header promises {expected} bytes, file has {}",
            body.len()
        )));
    }
    Ok(IdxTensor {
        dims,
        payload: body[..expected].to_vec(),
    })
}

/// Parses an image file and a label file from memory.
///
/// Pixels are divided by 255; each image is flattened row-major.
/// `num_classes` is one more than the largest label.
pub fn parse_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let img = parse_tensor(images, IMAGES_MAGIC, "images")?;
    let lab = parse_tensor(labels, LABELS_MAGIC, "labels")?;
    let (n_img, n_lab) = (img.dims[0], lab.dims[0]);
    if n_img != n_lab {
        return Err(Error::Idx(format!(
            "item count mismatch: {n_img} images but {n_lab} labels"
        )));
    }
    if n_img == 0 {
        return Err(Error::Idx("files contain zero items".into()));
    }
    let d = img.dims[1] * img.dims[2];
    let scale = T::lit(255.0);
    let features = img
        .payload
        .iter()
        .map(|&p| T::lit(f64::from(p)) / scale)
        .collect();
    let labels: Vec<usize> = lab.payload.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Matrix::from_vec(n_img, d, features)?, labels, num_classes)
}

pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<T>> {
    let images = fs::read(images_path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", images_path.as_ref().display())))?;
    let labels = fs::read(labels_path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", labels_path.as_ref().display())))?;
    parse_idx(&images, &labels)
}

/// Encodes features as an IDX image file of `rows × cols` items.
/// Values are clamped to `[0, 1]` and quantized to `round(255·x)`.
pub fn encode_idx_images<T: Scalar>(
    features: &Matrix<T>,
    rows: usize,
    cols: usize,
) -> Result<Vec<u8>> {
    if rows * cols != features.cols() {
        return Err(Error::DimensionMismatch {
            context: "idx image shape",
            expected: features.cols(),
            found: rows * cols,
        });
    }
    let mut out = Vec::with_capacity(16 + features.as_slice().len());
    for v in [
        IMAGES_MAGIC,
        features.rows() as u32,
        rows as u32,
        cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(features.as_slice().iter().map(|&x| {
        let q = (x.as_f64().clamp(0.0, 1.0) * 255.0).round();
        q as u8
    }));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::Idx(format!("label {l} does not fit in an unsigned byte")))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_idx<T: Scalar>(
    dataset: &Dataset<T>,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(
        images_path,
        encode_idx_images(dataset.features(), rows, cols)?,
    )?;
    fs::write(labels_path, encode_idx_labels(dataset.labels())?)?;
    Ok(())
}
