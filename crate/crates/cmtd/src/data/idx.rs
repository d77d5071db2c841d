//! IDX image/label files (the MNIST distribution format). Big-endian
//! throughout: image files carry magic 0x00000803 and dims (n, rows,
//! cols); label files carry magic 0x00000801 and dim (n). Pixels are
//! bytes, scaled to [0,1] on load by division with 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{sha256_file, DataError, Dataset, Provenance};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'p> {
    inner: BufReader<File>,
    path: &'p Path,
    offset: u64,
}

impl<'p> Reader<'p> {
    fn open(path: &'p Path) -> Result<Self, DataError> {
        Ok(Self {
            inner: BufReader::new(File::open(path)?),
            path,
            offset: 0,
        })
    }

    fn exact(&mut self, buf: &mut [u8], field: &'static str) -> Result<(), DataError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(DataError::Truncated {
                path: self.path.display().to_string(),
                offset: self.offset,
                field,
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn be_u32(&mut self, field: &'static str) -> Result<u32, DataError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, field)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Loads an IDX image/label pair as a dataset with 10 classes.
pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<Dataset, DataError> {
    let mut ir = Reader::open(image_path)?;
    let magic = ir.be_u32("image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: image_path.display().to_string(),
            found: magic,
            expected: IMAGE_MAGIC,
            offset: 0,
        });
    }
    let count = ir.be_u32("image count")? as usize;
    let rows = ir.be_u32("rows")? as usize;
    let cols = ir.be_u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::DimensionMismatch {
            path: image_path.display().to_string(),
            reason: format!("image dims {rows}x{cols}"),
        });
    }
    let mut pixels = vec![0u8; count * rows * cols];
    ir.exact(&mut pixels, "image pixels")?;

    let mut lr = Reader::open(label_path)?;
    let magic = lr.be_u32("label magic")?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: label_path.display().to_string(),
            found: magic,
            expected: LABEL_MAGIC,
            offset: 0,
        });
    }
    let label_count = lr.be_u32("label count")? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut labels = vec![0u8; label_count];
    lr.exact(&mut labels, "labels")?;

    let values: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(vec![count, 1, rows, cols], values)?;
    Dataset::new(
        images,
        labels,
        10,
        "idx",
        Provenance {
            source: format!("{} + {}", image_path.display(), label_path.display()),
            file_hashes: vec![sha256_file(image_path)?, sha256_file(label_path)?],
            subset_seed: None,
            n_per_class: None,
        },
    )
}

/// Writes a single-channel dataset as an IDX pair. Pixels are quantized
/// with round(pixel * 255), the inverse of the load scaling.
pub fn write_mnist_idx(
    dataset: &Dataset,
    image_path: &Path,
    label_path: &Path,
) -> Result<(), DataError> {
    let shape = dataset.images.shape();
    assert_eq!(shape.len(), 4, "expected (N,1,H,W)");
    assert_eq!(shape[1], 1, "IDX images are single-channel");
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);

    let mut iw = BufWriter::new(File::create(image_path)?);
    iw.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    iw.write_all(&(n as u32).to_be_bytes())?;
    iw.write_all(&(rows as u32).to_be_bytes())?;
    iw.write_all(&(cols as u32).to_be_bytes())?;
    let bytes: Vec<u8> = dataset
        .images
        .values()
        .iter()
        .map(|&p| (p * 255.0).round() as u8)
        .collect();
    iw.write_all(&bytes)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(label_path)?);
    lw.write_all(&LABEL_MAGIC.to_be_bytes())?;
    lw.write_all(&(n as u32).to_be_bytes())?;
    lw.write_all(&dataset.labels)?;
    lw.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn byte_dataset(bytes: &[u8], labels: Vec<u8>, hw: usize) -> Dataset {
        let values: Vec<f64> = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Dataset::new(
            Tensor::new(vec![labels.len(), 1, hw, hw], values).unwrap(),
            labels,
            10,
            "t",
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_bytes_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let src = byte_dataset(&[0, 255, 128, 7, 200, 42, 13, 99], vec![3, 9], 2);
        write_mnist_idx(&src, &ip, &lp).unwrap();
        let loaded = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(loaded.labels, vec![3, 9]);
        // endpoints: byte 255 -> 1.0, byte 0 -> 0.0
        assert_eq!(loaded.images.values()[0], 0.0);
        assert_eq!(loaded.images.values()[1], 1.0);
        // normalization exact: round(pixel*255) recovers the byte
        for (&pixel, &byte) in loaded.images.values().iter().zip([0u8, 255, 128, 7, 200, 42, 13, 99].iter()) {
            assert_eq!((pixel * 255.0).round() as u8, byte);
        }
        assert_eq!(loaded.images.values(), src.images.values());
    }

    #[test]
    fn label_magic_in_image_slot_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let src = byte_dataset(&[1, 2, 3, 4], vec![0], 2);
        write_mnist_idx(&src, &ip, &lp).unwrap();
        // swap: feed the label file where the image file is expected
        let err = load_mnist_idx(&lp, &ip).unwrap_err();
        match err {
            DataError::BadMagic { found, expected, .. } => {
                assert_eq!(found, LABEL_MAGIC);
                assert_eq!(expected, IMAGE_MAGIC);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let src = byte_dataset(&[1, 2, 3, 4, 5, 6, 7, 8], vec![0, 1], 2);
        write_mnist_idx(&src, &ip, &lp).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        match err {
            DataError::Truncated { offset, field, .. } => {
                assert_eq!(field, "image pixels");
                assert_eq!(offset, 16); // header read, payload failed
            }
            other => panic!("{other}"),
        }
    }
}
