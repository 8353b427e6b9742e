//! IDX files as used by MNIST.
//!
//! Header: big-endian magic (`0x00000803` images, `0x00000801` labels),
//! then one big-endian `u32` per dimension, then the raw `u8` payload.
//! Gzip-compressed files are detected by their magic and inflated.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded image file: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("idx header truncated at byte {at}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::format(format!(
            "idx magic {magic:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let body = &bytes[header..];
    if body.len() < len {
        return Err(Error::format(format!(
            "idx payload truncated: {} of {len} bytes",
            body.len()
        )));
    }
    if body.len() > len {
        return Err(Error::format(format!(
            "idx payload has {} trailing bytes",
            body.len() - len
        )));
    }
    Ok(body)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("idx image dimensions overflow"))?;
    let pixels = payload(bytes, 16, len)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

/// Read a file, inflating it if it is gzip. A missing `path` falls back to `path.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let path: PathBuf = if path.exists() {
        path.to_path_buf()
    } else {
        let mut gz = path.as_os_str().to_owned();
        gz.push(".gz");
        let gz = PathBuf::from(gz);
        if gz.exists() {
            gz
        } else {
            path.to_path_buf()
        }
    };
    let raw = fs::read(&path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Images scaled by `1/255` into an `n × rows·cols` dataset with ten classes.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::format(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let features = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let inputs = Tensor::new(vec![images.count, features], data)?;
    Dataset::new(inputs, labels.into_iter().map(usize::from).collect(), 10, split)
}

/// Load a split from a directory holding the standard MNIST file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn images(count: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(body);
        b
    }

    fn labels(body: &[u8]) -> Vec<u8> {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(body.len() as u32).to_be_bytes());
        b.extend_from_slice(body);
        b
    }

    #[test]
    fn parses_images_and_labels() {
        let img = parse_idx_images(&images(2, 1, 2, &[0, 255, 7, 8])).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 1, 2));
        assert_eq!(img.pixels, vec![0, 255, 7, 8]);
        assert_eq!(parse_idx_labels(&labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let as_labels = images(1, 1, 1, &[0]);
        assert!(matches!(parse_idx_labels(&as_labels), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&labels(&[1])), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_overflow() {
        assert!(parse_idx_images(&images(2, 2, 2, &[0; 7])).is_err());
        assert!(parse_idx_images(&images(1, 1, 1, &[0; 2])).is_err());
        assert!(parse_idx_images(&images(u32::MAX, u32::MAX, u32::MAX, &[])).is_err());
        assert!(parse_idx_images(&IMAGES_MAGIC.to_be_bytes()).is_err());
        assert!(parse_idx_labels(&[]).is_err());
    }

    #[test]
    fn loads_gzip_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("train-images-idx3-ubyte");
        let lp = dir.path().join("train-labels-idx1-ubyte.gz");
        std::fs::write(&ip, images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&labels(&[4, 2])).unwrap();
        std::fs::write(&lp, gz.finish().unwrap()).unwrap();

        let d = load_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.features(), 2);
        assert_eq!(d.inputs().data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.labels(), &[4, 2]);
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, images(2, 1, 1, &[0, 0])).unwrap();
        std::fs::write(&lp, labels(&[1])).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp, Split::Test), Err(Error::Format(_))));
    }
}
