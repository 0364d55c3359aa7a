use std::fs;
use std::path::Path;

use crate::dataset::ImageDataset;
use crate::error::{io_err, DataError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or(DataError::Truncated { needed: at + 4, available: bytes.len() })?;
    Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::Magic { expected, found });
    }
    Ok(())
}

fn exact_payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let needed = header + len;
    if bytes.len() < needed {
        return Err(DataError::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(DataError::Format(format!("{} trailing bytes after IDX payload", bytes.len() - needed)));
    }
    Ok(&bytes[header..])
}

/// Parses an IDX3 unsigned-byte image file into `(count, height, width, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let m = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let pixels = exact_payload(bytes, 16, m * h * w)?;
    Ok((m, h, w, pixels.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let m = be_u32(bytes, 4)? as usize;
    Ok(exact_payload(bytes, 8, m)?.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair as a single-channel dataset. The class count
/// is one past the largest label present.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (m, h, w, pixels) = parse_idx_images(&fs::read(ip).map_err(io_err(ip))?)?;
    let labels = parse_idx_labels(&fs::read(lp).map_err(io_err(lp))?)?;
    if labels.len() != m {
        return Err(DataError::CountMismatch { images: m, labels: labels.len() });
    }
    let classes = labels.iter().max().map_or(1, |&l| l + 1);
    let name = ip.file_name().map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    ImageDataset::new(name, pixels, labels, [1, h, w], classes)
}

pub fn encode_idx_images(ds: &ImageDataset) -> Result<Vec<u8>> {
    if ds.channels() != 1 {
        return Err(DataError::Format(format!("IDX images are single-channel, dataset has {}", ds.channels())));
    }
    let mut out = Vec::with_capacity(16 + ds.images().len());
    for v in [IMAGES_MAGIC, ds.len() as u32, ds.height() as u32, ds.width() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(ds.images());
    Ok(out)
}

pub fn encode_idx_labels(ds: &ImageDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in ds.labels() {
        out.push(u8::try_from(l).map_err(|_| DataError::Format(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

pub fn write_idx(ds: &ImageDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, encode_idx_images(ds)?).map_err(io_err(ip))?;
    fs::write(lp, encode_idx_labels(ds)?).map_err(io_err(lp))?;
    Ok(())
}
