use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: usize = 10;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR10_RECORD: usize = 1 + PIXELS;

/// Reads a CIFAR-10 binary batch file into a dataset with pixels in `[0, 1]`.
pub fn ingest_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(fmt(format!(
            "size {} is not a positive multiple of the {CIFAR10_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(fmt(format!("record {i} has label {label}, expected 0..{CIFAR10_CLASSES}")));
        }
        labels.push(label);
        // x/255 is exact in f32 after rounding, so no precision pass is needed.
        data.extend(rec[1..].iter().map(|&b| (b as f32 / 255.0) as f64));
    }
    let images = Tensor::new(vec![n, 3, SIDE, SIDE], data)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar10".into());
    Dataset::new(name, 0, CIFAR10_CLASSES, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (r, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend((0..PIXELS).map(|p| ((p * 7 + r * 13) % 256) as u8));
        }
        out
    }

    #[test]
    fn ten_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        fs::write(&path, records(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9])).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 30_730);
        let ds = ingest_cifar10(&path).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.image_dims(), (3, 32, 32));
    }

    #[test]
    fn write_then_read_recovers_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.bin");
        let raw = records(&[3, 9]);
        fs::write(&path, &raw).unwrap();
        let ds = ingest_cifar10(&path).unwrap();
        assert_eq!(ds.labels(), &[3, 9]);
        for r in 0..2 {
            let back: Vec<u8> = ds.image(r).iter().map(|&x| (x * 255.0).round() as u8).collect();
            assert_eq!(back, raw[r * CIFAR10_RECORD + 1..(r + 1) * CIFAR10_RECORD]);
        }
        // Red plane first, row-major.
        assert_eq!(ds.images().get(&[1, 0, 0, 1]), (raw[CIFAR10_RECORD + 2] as f32 / 255.0) as f64);
    }

    #[test]
    fn bad_size_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, vec![0u8; CIFAR10_RECORD + 1]).unwrap();
        assert!(matches!(ingest_cifar10(&path), Err(Error::Format { .. })));
        fs::write(&path, records(&[255])).unwrap();
        let err = ingest_cifar10(&path).unwrap_err().to_string();
        assert!(err.contains("label 255"), "{err}");
    }
}
