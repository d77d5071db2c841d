//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3072 pixel bytes (red, green, blue planes of a 32x32 image).

use std::path::Path;

use super::{sha256_file, DataError, Dataset, Provenance};
use crate::tensor::Tensor;

const RECORD: usize = 1 + 3 * 1024;

/// Loads one or more CIFAR-10 batch files into a single dataset. An empty
/// file contributes nothing (logged as a warning); a file whose length is
/// not a multiple of the 3073-byte record size is rejected.
pub fn load_cifar10_bin(paths: &[std::path::PathBuf]) -> Result<Dataset, DataError> {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut hashes = Vec::new();
    let mut sources = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() {
            log::warn!("{}: empty CIFAR-10 batch file", path.display());
            continue;
        }
        if bytes.len() % RECORD != 0 {
            return Err(DataError::MisalignedFile {
                path: path.display().to_string(),
                len: bytes.len() as u64,
                record: RECORD as u64,
            });
        }
        for record in bytes.chunks_exact(RECORD) {
            labels.push(record[0]);
            values.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
        hashes.push(sha256_file(path)?);
        sources.push(path.display().to_string());
    }
    let count = labels.len();
    let images = Tensor::new(vec![count, 3, 32, 32], values)?;
    Dataset::new(
        images,
        labels,
        10,
        "cifar10",
        Provenance {
            source: sources.join(" + "),
            file_hashes: hashes,
            subset_seed: None,
            n_per_class: None,
        },
    )
}

/// Writes a 3-channel dataset in the CIFAR-10 record layout.
pub fn write_cifar10_bin(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let shape = dataset.images.shape();
    assert_eq!(&shape[1..], &[3, 32, 32], "expected (N,3,32,32)");
    let per = 3 * 1024;
    let mut out = Vec::with_capacity(dataset.len() * RECORD);
    for (i, &label) in dataset.labels.iter().enumerate() {
        out.push(label);
        out.extend(
            dataset.images.values()[i * per..(i + 1) * per]
                .iter()
                .map(|&p| (p * 255.0).round() as u8),
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_synthetic_batch_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for i in 0..5u8 {
            bytes.push(9 - i); // labels 9,8,7,6,5
            bytes.extend(std::iter::repeat(i * 40).take(3072));
        }
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_bin(&[path]).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.labels[0], 9);
        assert_eq!(ds.images.shape(), &[5, 3, 32, 32]);
        assert_eq!(ds.images.values()[3 * 1024], 40.0 / 255.0);
    }

    #[test]
    fn misaligned_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 3072]).unwrap(); // one record minus the label
        assert!(matches!(
            load_cifar10_bin(&[path]),
            Err(DataError::MisalignedFile { .. })
        ));
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, []).unwrap();
        let ds = load_cifar10_bin(&[path]).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.bin");
        let values: Vec<f64> = (0..2 * 3072).map(|i| ((i * 7) % 256) as f64 / 255.0).collect();
        let src = Dataset::new(
            Tensor::new(vec![2, 3, 32, 32], values).unwrap(),
            vec![1, 9],
            10,
            "t",
            Provenance::default(),
        )
        .unwrap();
        write_cifar10_bin(&src, &path).unwrap();
        let loaded = load_cifar10_bin(&[path]).unwrap();
        assert_eq!(loaded.labels, src.labels);
        assert_eq!(loaded.images.values(), src.images.values());
    }
}
