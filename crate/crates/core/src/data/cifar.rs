//! CIFAR-10 binary batches (`data_batch_*.bin` / `test_batch.bin`):
//! records of 1 label byte + 3072 CHW pixel bytes.

use crate::error::{HmdcError, Result};
use std::path::Path;

const RECORD: usize = 1 + 3 * 32 * 32;

/// Returns `(pixels_chw, labels)` concatenated over the given batch files.
pub fn read_cifar_batches(dir: &Path, files: &[&str]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| HmdcError::io(&path, e))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(HmdcError::ingestion(
                &path,
                format!("CIFAR batch size {} not a multiple of {RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(RECORD) {
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok((pixels, labels))
}
