//! Datasets: IDX ingestion, synthetic Gaussian blobs, and shuffled batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs lie in `[0, 1]`, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidLabel {
                label,
                classes: num_classes,
            });
        }
        if let Some(index) = inputs.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("input entry {index} outside [0, 1]")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(what.display().to_string()))
}

/// Parse an MNIST-format image/label pair, scaling pixels by `1/255`.
/// `num_classes` is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }

    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if count != n_labels {
        return Err(Error::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let pixels = img
        .get(16..16 + count * dim)
        .ok_or_else(|| Error::Truncated(images_path.display().to_string()))?;
    let labels: Vec<usize> = lab
        .get(8..8 + count)
        .ok_or_else(|| Error::Truncated(labels_path.display().to_string()))?
        .iter()
        .map(|&b| b as usize)
        .collect();
    if count == 0 || dim == 0 {
        return Err(Error::EmptyBatch);
    }
    let inputs = Matrix::new(count, dim, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(inputs, labels, num_classes, name)
}

/// Write an IDX pair. Pixels are stored as `round(255·x)`; images are
/// `rows × cols` with `rows · cols == ds.dim()`.
pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::InvalidShape(format!("{rows}x{cols} images for dimension {}", ds.dim())));
    }
    if ds.num_classes > 256 {
        return Err(Error::Invalid("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.inputs.data().len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.inputs.data().iter().map(|&x| (x * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&y| y as u8));
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Balanced Gaussian clusters around seeded uniform centers, clipped to
/// `[0, 1]`. Samples are interleaved by class.
pub fn synth_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 || !(spread >= 0.0) {
        return Err(Error::Invalid("synth_blobs needs positive sizes and a nonnegative spread".into()));
    }
    let mut r = rng::rng_for(seed, stream::DATA, 0);
    let centers = Matrix::from_fn(num_classes, dim, |_, _| r.random::<f64>());
    let n = num_classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let inputs = Matrix::from_fn(n, dim, |i, j| {
        let noise: f64 = r.sample(StandardNormal);
        (centers.get(labels[i], j) + spread * noise).clamp(0.0, 1.0)
    });
    Dataset::new(inputs, labels, num_classes, format!("blobs-{num_classes}x{per_class}x{dim}-s{seed}"))
}

/// Seeded shuffled minibatches; the final partial batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Matrix, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some((self.ds.inputs.select_rows(idx), idx.iter().map(|&i| self.ds.labels[i]).collect()))
    }
}

pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Batches<'_>> {
    if batch_size < 1 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::rng_for(epoch_seed, stream::SHUFFLE, 0));
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}
