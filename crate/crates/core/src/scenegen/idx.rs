use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled grayscale digit images, stored as raw 8-bit intensities.
///
/// Intensity `v` stands for `v / 255` in [0, 1]; background pixels are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DigitSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != rows * cols * labels.len() {
            return Err(Error::Invalid(format!(
                "{} pixels for {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(DigitSet { rows, cols, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` rescaled to [0, 1].
    pub fn image_unit(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&v| v as f32 / 255.0).collect()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// First `n` images.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        DigitSet {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..n * self.rows * self.cols].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// SHA-256 over extents, pixels and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u32).to_le_bytes());
        h.update((self.cols as u32).to_le_bytes());
        h.update((self.len() as u32).to_le_bytes());
        h.update(&self.pixels);
        h.update(&self.labels);
        hex::encode(h.finalize())
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parses an IDX image file (magic 0x803, three big-endian extents).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < want {
        return Err(Error::format(path, format!("truncated: {} of {want} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, body[..want].to_vec()))
}

/// Parses an IDX label file (magic 0x801, one big-endian extent).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(path, format!("truncated: {} of {n} labels", body.len())));
    }
    Ok(body[..n].to_vec())
}

/// Loads an IDX image/label file pair.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<DigitSet> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&std::fs::read(ip)?, ip)?;
    let labels = parse_idx_labels(&std::fs::read(lp)?, lp)?;
    if labels.len() != n {
        return Err(Error::format(lp, format!("{} labels for {n} images", labels.len())));
    }
    DigitSet::new(rows, cols, pixels, labels)
}

/// Loads the standard train and test pairs from `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(DigitSet, DigitSet)> {
    let d = dir.as_ref();
    let train = load_mnist_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Encodes a set in IDX form; the inverse of [`load_mnist_idx`].
pub fn encode_idx(set: &DigitSet) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + set.pixels.len());
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for v in [set.len(), set.rows, set.cols] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    images.extend_from_slice(&set.pixels);
    let mut labels = Vec::with_capacity(8 + set.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(set.len() as u32).to_be_bytes());
    labels.extend_from_slice(&set.labels);
    (images, labels)
}
