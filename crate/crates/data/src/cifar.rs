use std::fs;
use std::path::Path;

use crate::dataset::ImageDataset;
use crate::error::{io_err, DataError, Result};

pub const RECORD_BYTES: usize = 3073;
pub const CLASSES: usize = 10;
const SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    pub fn file_names(self) -> Vec<String> {
        match self {
            CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarSplit::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

/// Decodes CIFAR-10 binary records (one label byte, then 1024 red, green
/// and blue bytes) and appends them to `images` / `labels`.
pub fn parse_cifar10_records(bytes: &[u8], images: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(DataError::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(DataError::Label { label, classes: CLASSES });
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

pub fn load_cifar10_file(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    parse_cifar10_records(&bytes, &mut images, &mut labels)?;
    let name = path.file_name().map_or_else(|| "cifar10".into(), |n| n.to_string_lossy().into_owned());
    ImageDataset::new(name, images, labels, [3, SIDE, SIDE], CLASSES)
}

/// Loads the five training batches or the test batch from a
/// `cifar-10-batches-bin` directory.
pub fn load_cifar10_bin(dir: impl AsRef<Path>, split: CifarSplit) -> Result<ImageDataset> {
    let dir = dir.as_ref();
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for name in split.file_names() {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        parse_cifar10_records(&bytes, &mut images, &mut labels)?;
    }
    let name = match split {
        CifarSplit::Train => "cifar10-train",
        CifarSplit::Test => "cifar10-test",
    };
    ImageDataset::new(name, images, labels, [3, SIDE, SIDE], CLASSES)
}

pub fn encode_cifar10_records(ds: &ImageDataset) -> Result<Vec<u8>> {
    if ds.dims() != [3, SIDE, SIDE] {
        return Err(DataError::Format(format!("CIFAR records hold 3x32x32 images, dataset is {:?}", ds.dims())));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels()[i] as u8);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_partial_records_and_bad_labels() {
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        assert!(matches!(parse_cifar10_records(&[0; 3072], &mut im, &mut lb), Err(DataError::Format(_))));
        let mut rec = vec![0u8; RECORD_BYTES];
        rec[0] = 10;
        assert!(matches!(
            parse_cifar10_records(&rec, &mut im, &mut lb),
            Err(DataError::Label { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn record_planes_stay_in_channel_order() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8));
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        parse_cifar10_records(&rec, &mut im, &mut lb).unwrap();
        assert_eq!(lb, vec![7]);
        assert_eq!((im[0], im[1024], im[2048], im[3071]), (0, 1, 2, 2));
    }
}
