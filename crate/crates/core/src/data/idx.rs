//! IDX container reader (big-endian header, `u8` payload), plain or gzipped.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::data::{one_hot, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

/// File contents, inflated when they start with the gzip signature.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Header dims and payload of an IDX buffer with the given magic.
pub fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(be_u32(bytes, 4 + 4 * d, path)? as usize);
    }
    let header = 4 + 4 * ndim;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Images as `[rows·cols, N]` scaled to `[0, 1]` and labels one-hot over 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path)?;
    let lab_bytes = read_maybe_gz(labels_path)?;
    let (idims, pixels) = parse_idx(&img_bytes, IMAGE_MAGIC, images_path)?;
    let (ldims, labels) = parse_idx(&lab_bytes, LABEL_MAGIC, labels_path)?;
    let (n, features) = (idims[0], idims[1] * idims[2]);
    if ldims[0] != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    if n == 0 || features == 0 {
        return Err(Error::InvalidArgument(format!("{} holds no images", images_path.display())));
    }
    let mut x = Tensor::zeros(&[features, n]);
    for j in 0..n {
        for (i, &p) in pixels[j * features..(j + 1) * features].iter().enumerate() {
            x.set(i, j, p as f64 / 255.0);
        }
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let y = one_hot(&labels, CLASSES)?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(x, y, name, split)
}

/// Serializes images (`[n][rows][cols]` bytes) to IDX.
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Standard file names inside an MNIST-style directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (std::path::PathBuf, std::path::PathBuf) {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |base: String| {
        let gz = dir.join(format!("{base}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(base)
        }
    };
    (
        pick(format!("{stem}-images-idx3-ubyte")),
        pick(format!("{stem}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab) = mnist_paths(dir, split);
    load_idx(&img, &lab, split)
}
