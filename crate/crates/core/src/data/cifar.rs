//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue pixel bytes, each plane row-major.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::compute::Tensor;
use crate::{Error, Result};

pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Splits raw batch bytes into labels and pixel bytes.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.is_empty() {
        return Err(Error::format(path, "empty CIFAR-10 batch file"));
    }
    if bytes.len() % RECORD_BYTES != 0 {
        let whole = bytes.len() / RECORD_BYTES;
        return Err(Error::format(
            path,
            format!(
                "truncated record at byte offset {} ({} trailing bytes, records are {RECORD_BYTES} bytes)",
                whole * RECORD_BYTES,
                bytes.len() - whole * RECORD_BYTES
            ),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                path,
                format!("label {} out of range at byte offset {}", rec[0], i * RECORD_BYTES),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn normalize(labels: Vec<usize>, pixels: &[u8]) -> Result<Dataset> {
    let n = labels.len();
    let plane = 32 * 32;
    let data = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i / plane) % 3;
            (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]
        })
        .collect();
    Dataset::new(
        Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
        10,
        CIFAR_MEAN.to_vec(),
        CIFAR_STD.to_vec(),
    )
}

/// Reads one batch file into a normalized dataset.
pub fn read_cifar_batch(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (labels, pixels) = parse_cifar_batch(&bytes, path)?;
    normalize(labels, &pixels)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in TRAIN_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (l, p) = parse_cifar_batch(&bytes, &path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let train = normalize(labels, &pixels)?;
    let test = read_cifar_batch(&dir.join(TEST_FILE))?;
    Ok((train, test))
}

/// Writes `ds` back to the binary format, undoing the normalization.
pub fn write_cifar_batch(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.image_dims() != (3, 32, 32) || ds.num_classes > 10 {
        return Err(Error::InvalidArgument(
            "only 3×32×32 datasets with at most 10 classes fit the CIFAR-10 format".into(),
        ));
    }
    let plane = 32 * 32;
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        for (j, &v) in ds.image(i).iter().enumerate() {
            let c = j / plane;
            let raw = (v * ds.std[c] + ds.mean[c]) * 255.0;
            out.push(raw.round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.bin");
        let mut rec = vec![0u8; RECORD_BYTES];
        rec[0] = 7;
        fs::write(&p, &rec).unwrap();
        let ds = read_cifar_batch(&p).unwrap();
        assert_eq!(ds.labels, [7]);
        for c in 0..3 {
            let v = ds.image(0)[c * 1024 + 5];
            assert!((v - (-CIFAR_MEAN[c] / CIFAR_STD[c])).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = vec![1u8; RECORD_BYTES * 2 + 10];
        let err = parse_cifar_batch(&bytes, Path::new("x.bin")).unwrap_err().to_string();
        assert!(err.contains(&format!("byte offset {}", 2 * RECORD_BYTES)), "{err}");
    }

    #[test]
    fn missing_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_cifar10(dir.path()).is_err());
    }
}
