//! Datasets: IDX file loading and writing, the train/validation split,
//! shuffled minibatch iteration, and synthetic datasets for fast tests.
//!
//! The IDX format is the classic big-endian digit-image layout: images use
//! magic `0x00000803` followed by count, row count, and column count (all
//! u32), then one unsigned byte per pixel; labels use magic `0x00000801`
//! followed by count, then one byte per label. Loaders read strictly: a bad
//! magic number, a truncated payload, trailing bytes, or a label above 9 all
//! fail loudly instead of being patched over. Pixels are mapped to `[0, 1]`
//! by dividing by 255.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Which role a dataset plays in the protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
    /// Train and validation combined.
    Full,
}

/// A labeled set of examples. One image per row, pixels in `[0, 1]`,
/// labels in `0..=9`.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    images: Matrix<S>,
    labels: Vec<u8>,
    split: Split,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(images: Matrix<S>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l > 9) {
            return Err(Error::Data(format!(
                "label {} at index {bad} is outside 0..=9",
                labels[bad]
            )));
        }
        for (i, &p) in images.as_slice().iter().enumerate() {
            let v = p.to_f64();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!(
                    "pixel value {v} at flat index {i} is outside [0, 1]"
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn images(&self) -> &Matrix<S> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature count per example.
    pub fn width(&self) -> usize {
        self.images.cols()
    }

    /// Copy of rows `start..end` under a new split tag.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Dataset<S> {
        Dataset {
            images: self.images.rows_range(start, end),
            labels: self.labels[start..end].to_vec(),
            split,
        }
    }
}

/// Stack two datasets in order (`a` first).
pub fn concat<S: Scalar>(a: &Dataset<S>, b: &Dataset<S>, split: Split) -> Result<Dataset<S>> {
    if a.width() != b.width() {
        return Err(Error::Data(format!(
            "cannot concatenate datasets of widths {} and {}",
            a.width(),
            b.width()
        )));
    }
    let mut data = Vec::with_capacity((a.len() + b.len()) * a.width());
    data.extend_from_slice(a.images.as_slice());
    data.extend_from_slice(b.images.as_slice());
    let images = Matrix::from_vec(a.len() + b.len(), a.width(), data)?;
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    Dataset::new(images, labels, split)
}

/// Split a 60,000-example training set into the first 50,000 (train) and
/// the last 10,000 (validation), preserving order.
pub fn split_train_valid<S: Scalar>(full: &Dataset<S>) -> Result<(Dataset<S>, Dataset<S>)> {
    if full.len() != 60_000 {
        return Err(Error::Data(format!(
            "train/validation split expects 60000 examples, got {}",
            full.len()
        )));
    }
    Ok((
        full.slice(0, 50_000, Split::Train),
        full.slice(50_000, 60_000, Split::Validation),
    ))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: end,
            actual: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an IDX image file as a row-per-image matrix with pixels scaled to
/// `[0, 1]`.
pub fn load_idx_images<S: Scalar>(path: &Path) -> Result<Matrix<S>> {
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} for images"),
        });
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let width = rows * cols;
    let data = bytes[16..]
        .iter()
        .map(|&b| S::from_f64(b as f64 / 255.0))
        .collect();
    Matrix::from_vec(n, width, data)
}

/// Load an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("magic {magic:#010x}, expected {LABELS_MAGIC:#010x} for labels"),
        });
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let labels = bytes[8..].to_vec();
    if let Some(bad) = labels.iter().position(|&l| l > 9) {
        return Err(Error::Data(format!(
            "label {} at index {bad} in {} is outside 0..=9",
            labels[bad],
            path.display()
        )));
    }
    Ok(labels)
}

/// Write images to an IDX file. `rows * cols` must match the matrix width;
/// pixels are mapped back to bytes by rounding `p * 255`.
pub fn write_idx_images<S: Scalar>(
    path: &Path,
    images: &Matrix<S>,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != images.cols() {
        return Err(Error::Data(format!(
            "image shape {rows}x{cols} does not match matrix width {}",
            images.cols()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.rows() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for &p in images.as_slice() {
        let b = (p.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        bytes.push(b);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write labels to an IDX file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().position(|&l| l > 9) {
        return Err(Error::Data(format!(
            "label {} at index {bad} is outside 0..=9",
            labels[bad]
        )));
    }
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load an image/label pair into a dataset.
pub fn load_idx_pair<S: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset<S>> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.rows(),
            labels_path.display(),
            labels.len()
        )));
    }
    Dataset::new(images, labels, split)
}

/// A fresh uniformly random visiting order for `n` examples. This is the
/// unit of shuffling: indices are permuted, the underlying storage never
/// moves.
pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    order
}

/// Iterator over shuffled minibatches. Every example appears exactly once
/// per epoch; the final batch may be short.
pub struct Minibatches<'a, S> {
    ds: &'a Dataset<S>,
    order: Vec<u32>,
    batch_size: usize,
    cursor: usize,
}

impl<'a, S: Scalar> Iterator for Minibatches<'a, S> {
    type Item = (Matrix<S>, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let width = self.ds.width();
        let mut data = Vec::with_capacity(idx.len() * width);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.ds.images.row(i as usize));
            labels.push(self.ds.labels[i as usize]);
        }
        let x = Matrix::from_vec(idx.len(), width, data).expect("sized above");
        Some((x, labels))
    }
}

/// Shuffled minibatches for one epoch. `batch_size` must be at least 1.
pub fn minibatches<'a, S: Scalar>(
    ds: &'a Dataset<S>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Minibatches<'a, S> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    Minibatches {
        ds,
        order: epoch_order(ds.len(), rng),
        batch_size,
        cursor: 0,
    }
}

/// Synthetic dataset families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    /// The four XOR corners in `[0, 1]^2`, labels `x XOR y`, cycled to
    /// length `n`.
    Xor,
    /// Two well-separated Gaussian blobs in `[0, 1]^2`, alternating classes.
    GaussianBlobs,
}

/// Standard normal draw via Box-Muller on two uniform variates.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = loop {
        let v = rng.gen::<f64>();
        if v > 0.0 {
            break v;
        }
    };
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Build a toy dataset of `n` examples with two features. XOR ignores the
/// generator entirely; blobs draw from it.
pub fn make_toy<S: Scalar>(kind: ToyKind, n: usize, rng: &mut ChaCha8Rng, split: Split) -> Dataset<S> {
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    match kind {
        ToyKind::Xor => {
            const CORNERS: [(f64, f64, u8); 4] = [
                (0.0, 0.0, 0),
                (0.0, 1.0, 1),
                (1.0, 0.0, 1),
                (1.0, 1.0, 0),
            ];
            for i in 0..n {
                let (x, y, l) = CORNERS[i % 4];
                data.push(S::from_f64(x));
                data.push(S::from_f64(y));
                labels.push(l);
            }
        }
        ToyKind::GaussianBlobs => {
            const SIGMA: f64 = 0.04;
            for i in 0..n {
                let class = (i % 2) as u8;
                let center = if class == 0 { (0.3, 0.3) } else { (0.7, 0.7) };
                let x = (center.0 + SIGMA * normal(rng)).clamp(0.0, 1.0);
                let y = (center.1 + SIGMA * normal(rng)).clamp(0.0, 1.0);
                data.push(S::from_f64(x));
                data.push(S::from_f64(y));
                labels.push(class);
            }
        }
    }
    let images = Matrix::from_vec(n, 2, data).expect("sized above");
    Dataset::new(images, labels, split).expect("toy values are in range by construction")
}

/// Deterministic IDX files for exercising the loaders, including corrupt
/// ones. Running this twice over the same directory produces byte-identical
/// files.
pub mod fixtures {
    use super::*;
    use std::path::PathBuf;

    /// Paths of everything [`write_all`] produces.
    pub struct FixtureSet {
        /// Well-formed 5-image file, 28x28.
        pub valid_images: PathBuf,
        /// Well-formed labels for the five images.
        pub valid_labels: PathBuf,
        /// One all-zero 28x28 image.
        pub single_zero_image: PathBuf,
        /// A single label with value 7.
        pub single_label: PathBuf,
        /// Image file carrying the label magic number.
        pub wrong_magic_images: PathBuf,
        /// Label file carrying the image magic number.
        pub wrong_magic_labels: PathBuf,
        /// Image file whose header promises more pixels than it holds.
        pub truncated_images: PathBuf,
        /// Label file whose header promises more labels than it holds.
        pub truncated_labels: PathBuf,
        /// Label file containing the out-of-range value 12.
        pub bad_label: PathBuf,
    }

    fn raw_images(n: u32, rows: u32, cols: u32, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&n.to_be_bytes());
        bytes.extend_from_slice(&rows.to_be_bytes());
        bytes.extend_from_slice(&cols.to_be_bytes());
        for i in 0..(n * rows * cols) as usize {
            bytes.push(pixel(i));
        }
        bytes
    }

    fn raw_labels(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    fn put(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Write the full fixture set into `dir` (which must exist).
    pub fn write_all(dir: &Path) -> Result<FixtureSet> {
        let valid = raw_images(5, 28, 28, |i| ((i * 31 + 7) % 256) as u8);
        let labels = raw_labels(&[7, 2, 0, 9, 4]);
        let zero = raw_images(1, 28, 28, |_| 0);
        let single = raw_labels(&[7]);

        let mut wrong_magic_images = valid.clone();
        wrong_magic_images[..4].copy_from_slice(&LABELS_MAGIC.to_be_bytes());
        let mut wrong_magic_labels = labels.clone();
        wrong_magic_labels[..4].copy_from_slice(&IMAGES_MAGIC.to_be_bytes());

        let truncated_images = raw_images(2, 28, 28, |i| (i % 256) as u8)
            [..16 + 28 * 28 + 100]
            .to_vec();
        let truncated_labels = {
            let mut b = raw_labels(&[1, 2, 3, 4]);
            b[4..8].copy_from_slice(&10u32.to_be_bytes()); // header says 10, file has 4
            b
        };
        let bad_label = raw_labels(&[1, 12, 3]);

        Ok(FixtureSet {
            valid_images: put(dir, "valid-images.idx3", &valid)?,
            valid_labels: put(dir, "valid-labels.idx1", &labels)?,
            single_zero_image: put(dir, "single-zero-image.idx3", &zero)?,
            single_label: put(dir, "single-label.idx1", &single)?,
            wrong_magic_images: put(dir, "wrong-magic-images.idx3", &wrong_magic_images)?,
            wrong_magic_labels: put(dir, "wrong-magic-labels.idx1", &wrong_magic_labels)?,
            truncated_images: put(dir, "truncated-images.idx3", &truncated_images)?,
            truncated_labels: put(dir, "truncated-labels.idx1", &truncated_labels)?,
            bad_label: put(dir, "bad-label.idx1", &bad_label)?,
        })
    }
}
