//! MNIST IDX reader.
//!
//! Image files start with magic `0x00000803`, then count, rows and columns
//! as big-endian `u32`, then one unsigned byte per pixel. Label files start
//! with magic `0x00000801` and a count. Files may be stored raw or gzipped
//! (`.gz` suffix).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated (header declares {declared} bytes of data, file has {actual})")]
    Truncated {
        path: PathBuf,
        declared: usize,
        actual: usize,
    },
    #[error("no IDX file named {0} (raw or .gz) in the MNIST directory")]
    Missing(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn normalized(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&p| f32::from(p) / 255.0).collect()
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn header(path: &Path, bytes: &[u8], magic: u32, words: usize) -> Result<Vec<usize>, IdxError> {
    let truncated = |declared| IdxError::Truncated {
        path: path.to_path_buf(),
        declared,
        actual: bytes.len(),
    };
    let found = be_u32(bytes, 0).ok_or_else(|| truncated(4))?;
    if found != magic {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    (0..words)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|v| v as usize).ok_or_else(|| truncated(4 + 4 * words)))
        .collect()
}

pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let h = header(path, bytes, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (h[0], h[1], h[2]);
    let data = &bytes[16..];
    let declared = count * rows * cols;
    if data.len() != declared {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            declared,
            actual: data.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: data.to_vec(),
    })
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let count = header(path, bytes, LABELS_MAGIC, 1)?[0];
    let data = &bytes[8..];
    if data.len() != count {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            declared: count,
            actual: data.len(),
        });
    }
    Ok(data.to_vec())
}

pub fn load_images(path: &Path) -> Result<IdxImages, IdxError> {
    parse_images(path, &read_bytes(path)?)
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    parse_labels(path, &read_bytes(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mnist {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf, IdxError> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| IdxError::Missing(stem.to_string()))
}

fn load_set(dir: &Path, prefix: &str) -> Result<LabeledSet, IdxError> {
    let images = load_images(&locate(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = load_labels(&locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    Ok(LabeledSet { images, labels })
}

impl Mnist {
    /// Loads the four standard files from `dir`.
    pub fn load(dir: &Path) -> Result<Self, IdxError> {
        Ok(Self {
            train: load_set(dir, "train")?,
            test: load_set(dir, "t10k")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(count: u32, rows: u32, cols: u32, extra: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..(count * rows * cols) as usize + extra).map(|i| i as u8));
        b
    }

    #[test]
    fn parses_synthetic_images() {
        let imgs = parse_images(Path::new("x"), &image_file(2, 2, 3, 0)).unwrap();
        assert_eq!((imgs.count, imgs.rows, imgs.cols), (2, 2, 3));
        assert_eq!(imgs.image(1), &[6, 7, 8, 9, 10, 11]);
        assert_eq!(imgs.normalized(0)[1], 1.0 / 255.0);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = image_file(1, 2, 2, 0);
        b[3] = 0x01;
        assert!(matches!(parse_images(Path::new("x"), &b), Err(IdxError::BadMagic { found: 0x801, .. })));
        assert!(matches!(
            parse_images(Path::new("x"), &image_file(2, 2, 2, 0)[..20]),
            Err(IdxError::Truncated { declared: 8, actual: 4, .. })
        ));
        assert!(matches!(parse_images(Path::new("x"), &[0, 0]), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn parses_labels() {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend(3u32.to_be_bytes());
        b.extend([7, 2, 1]);
        assert_eq!(parse_labels(Path::new("l"), &b).unwrap(), vec![7, 2, 1]);
    }
}
