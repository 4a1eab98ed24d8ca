//! Datasets: IDX ingestion, shift augmentation, seeded batching and a
//! synthetic pattern dataset for fast tests.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x} at offset 0 (expected 0x{expected:08x})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated at offset {offset}: need {needed} bytes, {available} remain")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{images} holds {image_count} images but {labels} holds {label_count} labels")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        image_count: usize,
        label_count: usize,
    },
    #[error("{path}: label {label} at offset {offset} is outside 0..{num_classes}")]
    LabelOutOfRange {
        path: PathBuf,
        offset: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labeled images `[n, channels, height, width]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: &str, split: Split, num_classes: usize, images: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} labels for image tensor of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(DataError::Invalid("pixel values outside [0, 1]".into()));
        }
        Ok(Dataset {
            name: name.to_string(),
            split,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(channels, height, width)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let (c, h, w) = self.image_shape();
        let len = c * h * w;
        &self.images.data()[index * len..(index + 1) * len]
    }

    /// The first `limit` samples (all of them if `limit >= len`).
    pub fn take(&self, limit: usize) -> Dataset {
        if limit >= self.len() {
            return self.clone();
        }
        self.select(&(0..limit).collect::<Vec<_>>())
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (c, h, w) = self.image_shape();
        let len = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            num_classes: self.num_classes,
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("selected images"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// `[labels.len(), num_classes]` one-hot matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len().max(1), num_classes]);
    for (row, &l) in labels.iter().enumerate() {
        t.set(&[row, l], 1.0);
    }
    t
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn need(path: &Path, bytes: &[u8], offset: usize, needed: usize) -> Result<(), DataError> {
    if bytes.len() < offset + needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset,
            needed,
            available: bytes.len().saturating_sub(offset),
        });
    }
    Ok(())
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Reads an IDX header: checks the magic and returns the dimension sizes and
/// the payload offset.
fn idx_header(path: &Path, bytes: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, usize), DataError> {
    need(path, bytes, 0, 4)?;
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    need(path, bytes, 4, 4 * rank)?;
    let dims = (0..rank).map(|k| be_u32(bytes, 4 + 4 * k) as usize).collect();
    Ok((dims, 4 + 4 * rank))
}

/// Loads an IDX image/label pair (MNIST, Fashion-MNIST, Kuzushiji-MNIST).
/// Pixel bytes are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    load_idx_split(images_path, labels_path, "idx", Split::Train, 10)
}

pub fn load_idx_split(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    name: &str,
    split: Split,
    num_classes: usize,
) -> Result<Dataset, DataError> {
    let (ipath, lpath) = (images_path.as_ref(), labels_path.as_ref());
    let ibytes = read_file(ipath)?;
    let lbytes = read_file(lpath)?;

    let (idims, ioff) = idx_header(ipath, &ibytes, IDX_IMAGES_MAGIC, 3)?;
    let (count, h, w) = (idims[0], idims[1], idims[2]);
    need(ipath, &ibytes, ioff, count * h * w)?;
    let (ldims, loff) = idx_header(lpath, &lbytes, IDX_LABELS_MAGIC, 1)?;
    need(lpath, &lbytes, loff, ldims[0])?;
    if ldims[0] != count {
        return Err(DataError::CountMismatch {
            images: ipath.to_path_buf(),
            labels: lpath.to_path_buf(),
            image_count: count,
            label_count: ldims[0],
        });
    }
    if count == 0 || h == 0 || w == 0 {
        return Err(DataError::Invalid(format!("{}: empty image set", ipath.display())));
    }
    let pixels = ibytes[ioff..ioff + count * h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let mut labels = Vec::with_capacity(count);
    for (k, &b) in lbytes[loff..loff + count].iter().enumerate() {
        if b as usize >= num_classes {
            return Err(DataError::LabelOutOfRange {
                path: lpath.to_path_buf(),
                offset: loff + k,
                label: b as usize,
                num_classes,
            });
        }
        labels.push(b as usize);
    }
    let images = Tensor::new(&[count, 1, h, w], pixels).expect("image tensor");
    Dataset::new(name, split, num_classes, images, labels)
}

/// Writes single-channel images as an IDX3 file, quantizing pixels to bytes.
pub fn write_idx_images(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let (c, h, w) = dataset.image_shape();
    if c != 1 {
        return Err(DataError::Invalid(format!("IDX images need one channel, got {c}")));
    }
    let mut bytes = Vec::with_capacity(16 + dataset.images.len());
    bytes.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [dataset.len(), h, w] {
        bytes.extend((dim as u32).to_be_bytes());
    }
    bytes.extend(dataset.images.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    write_file(path.as_ref(), &bytes)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend(IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend((labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    write_file(path.as_ref(), &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    write_atomic(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Translates a `[channels, height, width]` image by `dx` columns and `dy`
/// rows, filling vacated pixels with zero.
pub fn shift_image(image: &[f64], shape: (usize, usize, usize), dx: isize, dy: isize) -> Vec<f64> {
    let (c, h, w) = shape;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random integer translation with `(dx, dy)` uniform in `[-max_shift, max_shift]^2`.
pub fn augment_shift<R: Rng + ?Sized>(image: &[f64], shape: (usize, usize, usize), max_shift: usize, rng: &mut R) -> Vec<f64> {
    if max_shift == 0 {
        return image.to_vec();
    }
    let m = max_shift as i64;
    let dx = rng.random_range(-m..=m) as isize;
    let dy = rng.random_range(-m..=m) as isize;
    shift_image(image, shape, dx, dy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, channels, height, width]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
}

/// Seeded pass over a dataset in batches. The final partial batch is kept.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    max_shift: usize,
    rng: ChaCha8Rng,
}

/// Batches in a permutation drawn from `shuffle_seed`. With `max_shift > 0`
/// every image is shifted independently as it is drawn.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, max_shift: usize) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    BatchIter {
        dataset,
        order,
        batch_size,
        cursor: 0,
        max_shift,
        rng,
    }
}

/// Batches in dataset order without augmentation.
pub fn sequential_batches(dataset: &Dataset, batch_size: usize) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    BatchIter {
        dataset,
        order: (0..dataset.len()).collect(),
        batch_size,
        cursor: 0,
        max_shift: 0,
        rng: ChaCha8Rng::seed_from_u64(0),
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let shape = self.dataset.image_shape();
        let (c, h, w) = shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in &indices {
            let image = self.dataset.image(i);
            if self.max_shift > 0 {
                data.extend(augment_shift(image, shape, self.max_shift, &mut self.rng));
            } else {
                data.extend_from_slice(image);
            }
        }
        Some(Batch {
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("batch tensor"),
            labels: indices.iter().map(|&i| self.dataset.labels[i]).collect(),
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// Bar-pattern images: class `k` is a bright bar whose orientation and
/// position depend only on `k`, over low-level seeded noise. Every class is
/// present whenever `n >= num_classes`.
pub fn synthetic_dataset(seed: u64, n: usize, num_classes: usize) -> Result<Dataset, DataError> {
    if num_classes == 0 || n < num_classes {
        return Err(DataError::Invalid(format!("need n >= num_classes >= 1, got n={n}, classes={num_classes}")));
    }
    const SIDE: usize = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let slots = num_classes.div_ceil(2);
    let step = (20 / slots).max(1);
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    for &label in &labels {
        let offset = 4 + (label / 2) * step;
        let vertical = label % 2 == 1;
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (across, along) = if vertical { (x, y) } else { (y, x) };
                let on_bar = across >= offset && across < offset + 3 && (4..24).contains(&along);
                let pixel = if on_bar {
                    rng.random_range(0.8..1.0)
                } else {
                    rng.random_range(0.0..0.1)
                };
                data.push(pixel);
            }
        }
    }
    let images = Tensor::new(&[n, 1, SIDE, SIDE], data).expect("synthetic images");
    Dataset::new("synthetic", Split::Train, num_classes, images, labels)
}
