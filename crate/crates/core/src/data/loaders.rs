use std::path::Path;

use super::{Dataset, DatasetName, Split};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Label byte plus a 32x32 image in R, G, B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn data_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| data_err(path, 0, format!("cannot read file: {e}")))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| data_err(path, offset as u64, "truncated header"))
}

fn expect_len(bytes: &[u8], want: Option<usize>, path: &Path) -> Result<()> {
    match want {
        Some(w) if w == bytes.len() => Ok(()),
        Some(w) if w > bytes.len() => Err(data_err(
            path,
            bytes.len() as u64,
            format!("truncated: header declares {w} bytes"),
        )),
        Some(w) => Err(data_err(path, w as u64, "trailing bytes after declared payload")),
        None => Err(data_err(path, 4, "declared dimensions overflow")),
    }
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(data_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16));
    expect_len(bytes, want, path)?;
    if rows == 0 || cols == 0 {
        return Err(data_err(path, 8, "zero image dimension"));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file; every label must be below `num_classes`.
pub fn parse_idx_labels(bytes: &[u8], path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(data_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    expect_len(bytes, n.checked_add(8), path)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < num_classes {
                Ok(b as usize)
            } else {
                Err(data_err(path, (8 + i) as u64, format!("label {b} out of range")))
            }
        })
        .collect()
}

/// MNIST from the four canonical IDX files in `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = parse_idx_images(&read(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read(&lp)?, &lp, 10)?;
    if labels.len() != n {
        return Err(data_err(
            &lp,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    Dataset::new(DatasetName::Mnist, split, 1, rows, cols, 10, pixels, labels)
}

/// Splits CIFAR-10 binary records into planar pixels and labels.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(data_err(
            path,
            (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(data_err(
                path,
                (i * CIFAR_RECORD) as u64,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Inverse of [`parse_cifar_records`].
pub fn encode_cifar_records(ds: &Dataset) -> Vec<u8> {
    let per = ds.image_len();
    let mut out = Vec::with_capacity(ds.len() * (per + 1));
    for (i, &l) in ds.labels().iter().enumerate() {
        out.push(l as u8);
        out.extend_from_slice(&ds.pixels()[i * per..(i + 1) * per]);
    }
    out
}

/// CIFAR-10 from `data_batch_{1..5}.bin` (train) or `test_batch.bin`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let p = dir.join(f);
        let (px, lb) = parse_cifar_records(&read(&p)?, &p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    Dataset::new(DatasetName::Cifar10, split, 3, 32, 32, 10, pixels, labels)
}
