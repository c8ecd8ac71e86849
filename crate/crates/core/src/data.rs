//! MNIST IDX ingestion, normalization and deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with shape `(N, 1, rows, cols)` and labels in `0..10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    split: Split,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            expected: header_len,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            expected: header_len,
        });
    }
    let dims: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header_len + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            expected,
        });
    }
    Ok(dims)
}

/// Reads an IDX image/label file pair and scales pixels by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let idims = header(ip, &ib, IMAGE_MAGIC, 3)?;
    let ldims = header(lp, &lb, LABEL_MAGIC, 1)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Config(format!("{}: empty image set", ip.display())));
    }
    let labels = lb[8..8 + n]
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < CLASSES {
                Ok(label as usize)
            } else {
                Err(Error::BadLabel {
                    path: lp.to_path_buf(),
                    index,
                    label,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pixels = ib[16..16 + n * rows * cols].iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, rows, cols], pixels)?,
        labels,
        split,
    })
}

/// Canonical MNIST file names inside `dir`.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(images, labels, split)
}

/// Writes an IDX pair; used to build fixtures.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::CountMismatch {
            images: pixels.len() / (rows * cols).max(1),
            labels: n,
        });
    }
    let mut ib = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + n);
    for v in [LABEL_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, ib).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lb).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() < 2 || n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::Range {
                value: bad as f64,
                lo: 0.0,
                hi: (CLASSES - 1) as f64,
            });
        }
        if let Some(&bad) = images.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Range { value: bad, lo: 0.0, hi: 1.0 });
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.images.data()[i * d..(i + 1) * d]
    }

    /// One sample as a tensor of `sample_shape`.
    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape().to_vec(), self.image(i).to_vec()).expect("sample shape")
    }

    /// Stacks the given samples into a batch tensor `(B, ...sample_shape)`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            split: self.split,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `n` samples drawn without replacement by a seeded shuffle, in ascending order.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx = permutation(self.len(), seed);
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.subset(&idx)
    }
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// One pass over a dataset in fixed-size batches (the last may be short).
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (x, labels) = self.ds.gather(&indices);
        Some(Batch { indices, x, labels })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let order = if shuffle {
        permutation(ds.len(), seed)
    } else {
        (0..ds.len()).collect()
    };
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 1, 2, 2], (0..n * 4).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 10).collect(), Split::Train).unwrap()
    }

    #[test]
    fn batch_sizes() {
        let ds = tiny(10);
        let sizes: Vec<usize> = batches(&ds, 4, 0, true).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batches(&ds, 0, 0, true).is_err());
    }

    #[test]
    fn shuffle_determinism() {
        let ds = tiny(50);
        let a = batches(&ds, 8, 7, true).unwrap().next().unwrap().indices;
        let b = batches(&ds, 8, 7, true).unwrap().next().unwrap().indices;
        assert_eq!(a, b);
        let c = batches(&ds, 8, 8, true).unwrap().next().unwrap().indices;
        assert_ne!(a, c);
    }

    #[test]
    fn unshuffled_is_ascending() {
        let ds = tiny(10);
        let all: Vec<usize> = batches(&ds, 3, 0, false).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_every_sample_once() {
        let ds = tiny(37);
        let mut all: Vec<usize> = batches(&ds, 5, 3, true).unwrap().flat_map(|b| b.indices).collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn gather_copies_rows() {
        let ds = tiny(4);
        let (x, y) = ds.gather(&[2, 0]);
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(&x.data()[..4], ds.image(2));
        assert_eq!(y, vec![2, 0]);
    }

    #[test]
    fn dataset_rejects_bad_pixels() {
        let images = Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap();
        assert!(matches!(Dataset::new(images, vec![0], Split::Test), Err(Error::Range { .. })));
    }
}
