//! IDX file ingestion (the MNIST container format). Big-endian headers,
//! u8 payload; pixels are scaled to [0, 1].

use std::fs;
use std::path::Path;

use super::{DataError, Dataset};
use crate::scalar::Scalar;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::IdxTruncated { path: self.path.into(), offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Reads an images file, returning (pixels in [0,1], count, rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Vec<Scalar>, usize, usize, usize), DataError> {
    let buf = read_file(path)?;
    let path_str = path.display().to_string();
    let mut r = Reader { buf: &buf, pos: 0, path: &path_str };
    let magic = r.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::IdxBadMagic { path: path_str, found: magic, expected: IMAGES_MAGIC });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::IdxMalformed {
            path: path_str,
            detail: format!("zero image dimension {rows}x{cols}"),
        });
    }
    let pixels = r.take(count * rows * cols)?;
    let extra = buf.len() - r.pos;
    if extra != 0 {
        return Err(DataError::IdxMalformed {
            path: path_str,
            detail: format!("{extra} trailing bytes"),
        });
    }
    let data = pixels.iter().map(|&b| b as Scalar / 255.0).collect();
    Ok((data, count, rows, cols))
}

/// Reads a labels file, returning raw label bytes.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let buf = read_file(path)?;
    let path_str = path.display().to_string();
    let mut r = Reader { buf: &buf, pos: 0, path: &path_str };
    let magic = r.u32_be()?;
    if magic != LABELS_MAGIC {
        return Err(DataError::IdxBadMagic { path: path_str, found: magic, expected: LABELS_MAGIC });
    }
    let count = r.u32_be()? as usize;
    let labels = r.take(count)?;
    let extra = buf.len() - r.pos;
    if extra != 0 {
        return Err(DataError::IdxMalformed {
            path: path_str,
            detail: format!("{extra} trailing bytes"),
        });
    }
    Ok(labels.to_vec())
}

/// Loads an image/label file pair into a dataset. `limit` keeps only the
/// first N samples; `num_classes` defaults to max label + 1.
pub fn load_idx_dataset(
    images_path: &Path,
    labels_path: &Path,
    num_classes: Option<usize>,
    limit: Option<usize>,
) -> Result<Dataset, DataError> {
    let (mut data, count, rows, cols) = read_idx_images(images_path)?;
    let mut labels = read_idx_labels(labels_path)?;
    if count != labels.len() {
        return Err(DataError::CountMismatch { images: count, labels: labels.len() });
    }
    if let Some(limit) = limit {
        let keep = limit.min(count);
        labels.truncate(keep);
        data.truncate(keep * rows * cols);
    }
    let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
    let num_classes = match num_classes {
        Some(n) => n,
        None => labels.iter().max().map_or(1, |&m| m + 1),
    };
    Dataset::new(data, rows * cols, Some([1, rows, cols]), labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_images(path: &Path, images: &[[u8; 4]]) {
        let mut buf = Vec::new();
        buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        buf.extend_from_slice(&(images.len() as u32).to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        for img in images {
            buf.extend_from_slice(img);
        }
        fs::write(path, buf).unwrap();
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut buf = Vec::new();
        buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        buf.extend_from_slice(labels);
        fs::write(path, buf).unwrap();
    }

    #[test]
    fn loads_pair_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_images(&ip, &[[0, 255, 128, 64], [10, 20, 30, 40]]);
        write_labels(&lp, &[1, 0]);
        let ds = load_idx_dataset(&ip, &lp, None, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.image_shape(), Some([1, 2, 2]));
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.sample(0)[0], 0.0);
        assert_eq!(ds.sample(0)[1], 1.0);
        assert!((ds.sample(0)[2] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(ds.labels(), &[1, 0]);
    }

    #[test]
    fn limit_keeps_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_images(&ip, &[[1, 1, 1, 1], [2, 2, 2, 2], [3, 3, 3, 3]]);
        write_labels(&lp, &[0, 1, 2]);
        let ds = load_idx_dataset(&ip, &lp, Some(3), Some(2)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[0, 1]);
    }

    #[test]
    fn bad_magic_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        fs::write(&ip, 99u32.to_be_bytes()).unwrap();
        match read_idx_images(&ip).unwrap_err() {
            DataError::IdxBadMagic { found, expected, .. } => {
                assert_eq!(found, 99);
                assert_eq!(expected, IMAGES_MAGIC);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let mut buf = Vec::new();
        buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        buf.extend_from_slice(&5u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&[7; 3]);
        fs::write(&ip, buf).unwrap();
        assert!(matches!(
            read_idx_images(&ip),
            Err(DataError::IdxTruncated { offset: 16, .. })
        ));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_images(&ip, &[[1, 1, 1, 1]]);
        write_labels(&lp, &[0, 1]);
        assert!(matches!(
            load_idx_dataset(&ip, &lp, None, None),
            Err(DataError::CountMismatch { images: 1, labels: 2 })
        ));
    }
}
