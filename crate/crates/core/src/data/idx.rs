//! IDX (MNIST-style) binary format, plain or gzip-compressed.

use crate::error::{HmdcError, Result};
use std::io::Read;
use std::path::{Path, PathBuf};

fn read_maybe_gz(path_base: &Path) -> Result<(Vec<u8>, PathBuf)> {
    let plain = path_base.to_path_buf();
    let gz = path_base.with_extension(match path_base.extension() {
        // e.g. "train-images-idx3-ubyte" -> "train-images-idx3-ubyte.gz"
        Some(ext) => format!("{}.gz", ext.to_string_lossy()),
        None => "gz".to_string(),
    });
    if plain.is_file() {
        let bytes = std::fs::read(&plain).map_err(|e| HmdcError::io(&plain, e))?;
        return Ok((bytes, plain));
    }
    if gz.is_file() {
        let compressed = std::fs::read(&gz).map_err(|e| HmdcError::io(&gz, e))?;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&compressed[..])
            .read_to_end(&mut out)
            .map_err(|e| HmdcError::ingestion(&gz, format!("gzip decode failed: {e}")))?;
        return Ok((out, gz));
    }
    Err(HmdcError::ingestion(
        &plain,
        format!("missing dataset file (also tried {})", gz.display()),
    ))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Returns `(pixels, count, rows, cols)`; pixels are row-major u8.
pub fn read_idx_images(path_base: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let (bytes, path) = read_maybe_gz(path_base)?;
    if bytes.len() < 16 {
        return Err(HmdcError::ingestion(&path, "truncated IDX header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != 2051 {
        return Err(HmdcError::ingestion(
            &path,
            format!("bad IDX image magic {magic}, expected 2051"),
        ));
    }
    let n = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(HmdcError::ingestion(
            &path,
            format!("IDX image payload too short: {} < {need}", bytes.len()),
        ));
    }
    Ok((bytes[16..need].to_vec(), n, rows, cols))
}

pub fn read_idx_labels(path_base: &Path) -> Result<Vec<u8>> {
    let (bytes, path) = read_maybe_gz(path_base)?;
    if bytes.len() < 8 {
        return Err(HmdcError::ingestion(&path, "truncated IDX header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != 2049 {
        return Err(HmdcError::ingestion(
            &path,
            format!("bad IDX label magic {magic}, expected 2049"),
        ));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(HmdcError::ingestion(&path, "IDX label payload too short"));
    }
    Ok(bytes[8..8 + n].to_vec())
}

#[cfg(test)]
pub(crate) fn write_idx_fixture(dir: &Path, prefix: &str, images: &[u8], labels: &[u8], rows: usize, cols: usize) {
    use std::io::Write;
    let n = labels.len();
    assert_eq!(images.len(), n * rows * cols);
    let mut img = Vec::new();
    img.extend_from_slice(&2051u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(images);
    let mut lab = Vec::new();
    lab.extend_from_slice(&2049u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    std::fs::File::create(dir.join(format!("{prefix}-images-idx3-ubyte")))
        .unwrap()
        .write_all(&img)
        .unwrap();
    std::fs::File::create(dir.join(format!("{prefix}-labels-idx1-ubyte")))
        .unwrap()
        .write_all(&lab)
        .unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<u8> = (0..2 * 4 * 3).map(|i| i as u8).collect();
        write_idx_fixture(dir.path(), "train", &images, &[7, 2], 4, 3);
        let (px, n, r, c) = read_idx_images(&dir.path().join("train-images-idx3-ubyte")).unwrap();
        assert_eq!((n, r, c), (2, 4, 3));
        assert_eq!(px, images);
        let labels = read_idx_labels(&dir.path().join("train-labels-idx1-ubyte")).unwrap();
        assert_eq!(labels, vec![7, 2]);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_idx_images(Path::new("/nonexistent/foo-images-idx3-ubyte"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("/nonexistent/foo-images-idx3-ubyte"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad-images-idx3-ubyte");
        std::fs::write(&path, [0u8; 32]).unwrap();
        assert!(read_idx_images(&path).is_err());
    }
}
