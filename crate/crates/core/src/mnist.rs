//! MNIST IDX loading. Plain and gzip-compressed files are both accepted; the
//! container is detected from its first two bytes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Error)]
pub enum MnistError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    Magic { expected: u32, found: u32 },
    #[error("truncated IDX data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("images are {rows}x{cols}, expected 28x28")]
    Dimensions { rows: usize, cols: usize },
    #[error("label {value} at index {index} is not a digit")]
    Label { index: usize, value: u8 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// Raw image payload: `count` images of `PIXELS` bytes each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, MnistError> {
    let io = |source| MnistError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = fs::read(path).map_err(io)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, MnistError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(MnistError::Truncated {
            expected: offset + 4,
            actual: bytes.len(),
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages, MnistError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(MnistError::Magic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(MnistError::Dimensions { rows, cols });
    }
    let expected = 16 + count * PIXELS;
    if bytes.len() != expected {
        return Err(MnistError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(RawImages {
        count,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, MnistError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(MnistError::Magic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(MnistError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let labels = bytes[8..].to_vec();
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, v)| **v > 9) {
        return Err(MnistError::Label { index, value });
    }
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages, MnistError> {
    parse_idx_images(&read_file(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>, MnistError> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

/// Maps pixel bytes onto `[0, 1]` as `v / 255`.
pub fn normalize(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 255.0).collect()
}

/// Normalized images with their labels. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: &RawImages, labels: Vec<u8>) -> Result<Self, MnistError> {
        if images.count != labels.len() {
            return Err(MnistError::CountMismatch {
                images: images.count,
                labels: labels.len(),
            });
        }
        Ok(Self {
            pixels: normalize(&images.pixels),
            labels,
        })
    }

    /// Builds a dataset from already-normalized images (tests, synthetic data).
    pub fn from_parts(pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self, MnistError> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(MnistError::CountMismatch {
                images: pixels.len() / PIXELS,
                labels: labels.len(),
            });
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, v)| **v > 9) {
            return Err(MnistError::Label { index, value });
        }
        Ok(Self { pixels, labels })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self, MnistError> {
        let raw = load_idx_images(images)?;
        let labels = load_idx_labels(labels)?;
        Self::new(&raw, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f64] {
        &self.pixels[index * PIXELS..(index + 1) * PIXELS]
    }

    pub fn label(&self, index: usize) -> usize {
        usize::from(self.labels[index])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Copy of samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            pixels: self.pixels[start * PIXELS..end * PIXELS].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Copy with samples reordered by `order`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(order.len() * PIXELS);
        for &i in order {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            pixels,
            labels: order.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    pub(crate) fn image_file(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_images() {
        let payload: Vec<u8> = (0..2 * PIXELS).map(|i| (i % 256) as u8).collect();
        let raw = parse_idx_images(&image_file(2, 28, 28, &payload)).unwrap();
        assert_eq!(raw.count, 2);
        assert_eq!(raw.pixels, payload);
    }

    #[test]
    fn image_errors() {
        let labels = label_file(&[1, 2]);
        assert!(matches!(
            parse_idx_images(&labels),
            Err(MnistError::Magic { found: 0x801, .. })
        ));
        let short = image_file(2, 28, 28, &[0; PIXELS]);
        match parse_idx_images(&short) {
            Err(MnistError::Truncated { expected, actual }) => {
                assert_eq!(expected, 16 + 2 * PIXELS);
                assert_eq!(actual, 16 + PIXELS);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_idx_images(&image_file(1, 32, 32, &[0; 1024])),
            Err(MnistError::Dimensions { rows: 32, cols: 32 })
        ));
    }

    #[test]
    fn label_errors() {
        assert_eq!(parse_idx_labels(&label_file(&[0, 9, 3])).unwrap(), vec![0, 9, 3]);
        assert!(matches!(
            parse_idx_labels(&label_file(&[1, 12])),
            Err(MnistError::Label { index: 1, value: 12 })
        ));
        assert!(matches!(parse_idx_labels(&[]), Err(MnistError::Truncated { .. })));
        let mut short = label_file(&[1, 2, 3]);
        short.pop();
        assert!(matches!(parse_idx_labels(&short), Err(MnistError::Truncated { .. })));
    }

    #[test]
    fn normalize_values() {
        assert_eq!(normalize(&[0, 255, 128]), vec![0.0, 1.0, 128.0 / 255.0]);
        assert!((normalize(&[128])[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn loads_gzip_and_plain_files() {
        let dir = tempfile::tempdir().unwrap();
        let payload = vec![7u8; 3 * PIXELS];
        let img = image_file(3, 28, 28, &payload);
        let plain = dir.path().join("images");
        fs::write(&plain, &img).unwrap();
        let gz = dir.path().join("images.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&img).unwrap();
        fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx_images(&plain).unwrap(), load_idx_images(&gz).unwrap());

        let labels = dir.path().join("labels");
        fs::write(&labels, label_file(&[1, 2])).unwrap();
        assert!(matches!(
            Dataset::load(&plain, &labels),
            Err(MnistError::CountMismatch { images: 3, labels: 2 })
        ));
        assert!(matches!(
            load_idx_images(dir.path().join("missing")),
            Err(MnistError::Io { .. })
        ));
    }
}
