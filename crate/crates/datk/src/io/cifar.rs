//! CIFAR-10 binary ingestion: records of exactly 3073 bytes, one label byte
//! (0-9) followed by 3072 pixel bytes in channel-major R,G,B row-major order.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decode one binary file of CIFAR records; pixels are scaled to `[0,1]`.
pub fn decode_cifar_records(data: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if data.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!(
                "size {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                data.len()
            ),
        ));
    }
    let n = data.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in data.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(
                path,
                format!("record {i} has label {label}, expected 0..=9"),
            ));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_file(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let data = fs::read(path)?;
    decode_cifar_records(&data, path)
}

/// Load a CIFAR-10 binary dataset. `path` may be a single `.bin` file or the
/// standard directory layout, in which case `split` selects either the five
/// training batches or the test batch.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    if path.is_dir() {
        let files: Vec<_> = match split {
            Split::Train => (1..=5)
                .map(|i| path.join(format!("data_batch_{i}.bin")))
                .collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        };
        for file in files {
            let (p, l) = load_file(&file)?;
            pixels.extend(p);
            labels.extend(l);
        }
    } else {
        let (p, l) = load_file(path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    if n == 0 {
        // an empty file is a valid empty dataset; represent it with a
        // zero-length image stack
        return Dataset::new(Tensor::new(vec![0, 3, 32, 32], Vec::new())?, labels, CIFAR_CLASSES)
            .or_else(|_| {
                Err(Error::format(path, "empty dataset could not be represented"))
            });
    }
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        CIFAR_CLASSES,
    )
}

/// Write a dataset in the same record layout, quantizing pixels to bytes.
/// Images must be `[N,3,32,32]`.
pub fn save_cifar_binary(data: &Dataset, path: &Path) -> Result<()> {
    let (c, h, w) = data.image_dims();
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::contract(format!(
            "CIFAR binary requires [3,32,32] images, got [{c},{h},{w}]"
        )));
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD_BYTES);
    for i in 0..data.len() {
        out.push(data.labels()[i] as u8);
        for &v in &data.images().data()[i * per..(i + 1) * per] {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_decodes_label_and_scaled_pixels() {
        let mut record = vec![3u8];
        record.extend(std::iter::repeat_n(255u8, 3072));
        let (pixels, labels) = decode_cifar_records(&record, Path::new("one.bin")).unwrap();
        assert_eq!(labels, vec![3]);
        assert_eq!(pixels.len(), 3072);
        assert!(pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let (pixels, labels) = decode_cifar_records(&[], Path::new("empty.bin")).unwrap();
        assert!(pixels.is_empty());
        assert!(labels.is_empty());
    }

    #[test]
    fn two_record_fixture_decodes_byte_exactly() {
        // record 0: label 7, pixel 0 = 128, rest 0; record 1: label 0, all 64
        let mut data = vec![7u8];
        data.push(128);
        data.extend(std::iter::repeat_n(0u8, 3071));
        data.push(0);
        data.extend(std::iter::repeat_n(64u8, 3072));
        let (pixels, labels) = decode_cifar_records(&data, Path::new("two.bin")).unwrap();
        assert_eq!(labels, vec![7, 0]);
        assert!((pixels[0] - 128.0 / 255.0).abs() < 1e-12);
        assert!((pixels[0] - 0.50196).abs() < 1e-5);
        assert_eq!(pixels[1], 0.0);
        assert!((pixels[3072] - 64.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn bad_sizes_and_labels_are_format_errors() {
        let err = decode_cifar_records(&[0u8; 100], Path::new("bad.bin")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));

        let mut record = vec![10u8]; // label out of range
        record.extend(std::iter::repeat_n(0u8, 3072));
        let err = decode_cifar_records(&record, Path::new("label.bin")).unwrap_err();
        assert!(format!("{err}").contains("label 10"));
    }
}
