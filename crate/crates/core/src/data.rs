//! Labelled datasets: MNIST-style IDX files and synthetic Gaussian blobs.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...]` with values in `[0, 1]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!(
                "label {y} outside {classes} classes"
            )));
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("inputs must lie in [0, 1]".into()));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Disjoint train and test subsets drawn by a seeded shuffle.
    pub fn split(&self, seed: u64, n_train: usize, n_test: usize) -> Result<(Self, Self)> {
        if n_train + n_test > self.len() {
            return Err(Error::Config(format!(
                "split of {n_train} + {n_test} from {} samples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((
            self.subset(&idx[..n_train])?,
            self.subset(&idx[n_train..n_train + n_test])?,
        ))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Reads an IDX image file and label file (optionally gzip-compressed).
/// Images come back as `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    let lab = read_maybe_gz(labels)?;

    let magic = be_u32(&img, 0, images)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            images.display()
        )));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let pixels = n * rows * cols;
    if img.len() != 16 + pixels {
        return Err(Error::Format(format!(
            "{}: expected {} bytes of pixels, found {}",
            images.display(),
            pixels,
            img.len().saturating_sub(16)
        )));
    }

    let magic = be_u32(&lab, 0, labels)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            labels.display()
        )));
    }
    let n_labels = be_u32(&lab, 4, labels)? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "{n} images but {n_labels} labels ({})",
            labels.display()
        )));
    }
    if lab.len() != 8 + n {
        return Err(Error::Format(format!(
            "{}: expected {n} label bytes, found {}",
            labels.display(),
            lab.len().saturating_sub(8)
        )));
    }

    let data = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = lab[8..].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(inputs, labels, classes)
}

/// Writes an uncompressed IDX pair; mainly for tests and fixtures.
pub fn write_idx(images: &Path, labels: &Path, data: &Dataset) -> Result<()> {
    let shape = data.inputs.shape();
    let (rows, cols) = match shape {
        [_, 1, r, c] | [_, r, c] => (*r, *c),
        _ => {
            return Err(Error::Dimension(format!(
                "cannot write shape {shape:?} as IDX images"
            )))
        }
    };
    let mut img = Vec::with_capacity(16 + data.inputs.len());
    for v in [IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.inputs.data().iter().map(|v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [LABELS_MAGIC, data.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&y| y as u8));
    std::fs::write(images, img).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

/// Gaussian blobs in `[0, 1]^dim`, one per class, centres at least six
/// standard deviations apart. Labels are assigned round-robin.
pub fn gen_synthetic(seed: u64, n: usize, classes: usize, dim: usize) -> Result<Dataset> {
    if classes == 0 || dim == 0 || n < classes {
        return Err(Error::Argument(format!(
            "synthetic data needs n >= classes >= 1 and dim >= 1 (n={n}, classes={classes}, dim={dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sigma = 0.05;
    let centres = loop {
        let mut centres: Vec<Vec<f64>> = Vec::with_capacity(classes);
        let mut tries = 0;
        while centres.len() < classes && tries < 10_000 {
            tries += 1;
            let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.2..0.8)).collect();
            let far = centres.iter().all(|o| {
                o.iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    >= 6.0 * sigma
            });
            if far {
                centres.push(c);
            }
        }
        if centres.len() == classes {
            break centres;
        }
        sigma *= 0.8;
    };
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        for &c in &centres[y] {
            let z: f64 = rng.sample(StandardNormal);
            data.push((c + sigma * z).clamp(0.0, 1.0));
        }
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}
