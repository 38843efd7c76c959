//! CIFAR-10 binary ingestion, standardization, augmentation and batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + IMAGE_LEN;
pub const CLASSES: usize = 10;
pub const PAD: usize = 4;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Synthetic => "synthetic",
        })
    }
}

/// Images as `count x 3 x 32 x 32` pixels in `[0, 1]`, planar RGB.
/// Standardization happens when batches are assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(Error::Input(format!(
                "{} pixels do not make {} images of {IMAGE_LEN}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= CLASSES) {
            return Err(Error::Input(format!("label {} at index {i} out of range", labels[i])));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// Records `range` as a new dataset with the given split tag.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Self {
        Self {
            images: self.images[range.start * IMAGE_LEN..range.end * IMAGE_LEN].to_vec(),
            labels: self.labels[range].to_vec(),
            split,
        }
    }

    /// Seeded subset of `n` records.
    pub fn subset(&self, n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        let mut images = Vec::with_capacity(idx.len() * IMAGE_LEN);
        for &i in &idx {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Per-channel mean of the standardized pixels.
    pub fn standardized_channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for img in self.images.chunks_exact(IMAGE_LEN) {
            for (c, plane) in img.chunks_exact(SIDE * SIDE).enumerate() {
                acc[c] += plane.iter().map(|&p| standardize(p, c) as f64).sum::<f64>();
            }
        }
        let n = (self.len() * SIDE * SIDE).max(1) as f64;
        acc.map(|a| a / n)
    }
}

#[inline]
pub fn standardize(pixel: f32, channel: usize) -> f32 {
    (pixel - CIFAR_MEAN[channel]) / CIFAR_STD[channel]
}

/// Parse one CIFAR-10 binary batch file.
pub fn read_cifar_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_records(&bytes, split).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_records(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "size {} is not a multiple of the {RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let count = bytes.len() / RECORD_BYTES;
    let mut images = Vec::with_capacity(count * IMAGE_LEN);
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::Format(format!("record {i} has label byte {}", rec[0])));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset { images, labels, split })
}

/// Inverse of [`parse_records`]; pixels are rounded to the nearest byte.
pub fn encode_records(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push(l);
        out.extend(ds.image(i).iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn write_cifar_file(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_records(ds))?;
    Ok(())
}

/// Accept either the batch directory itself or its parent holding
/// `cifar-10-batches-bin/`.
fn resolve_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn cifar10_present(dir: &Path) -> bool {
    let d = resolve_dir(dir);
    d.join(TEST_FILE).is_file() && TRAIN_FILES.iter().all(|f| d.join(f).is_file())
}

/// Train (50000) and test (10000) splits from the five train batches and the
/// test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let d = resolve_dir(dir);
    let mut train = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        split: Split::Train,
    };
    for f in TRAIN_FILES {
        let part = read_cifar_file(&d.join(f), Split::Train)?;
        train.images.extend(part.images);
        train.labels.extend(part.labels);
    }
    let test = read_cifar_file(&d.join(TEST_FILE), Split::Test)?;
    log::info!("loaded CIFAR-10 from {}: {} train, {} test", d.display(), train.len(), test.len());
    Ok((train, test))
}

/// Class-conditional Gaussian blobs around the CIFAR channel means. Each
/// class has a colour offset (points spread on a sphere) and an oriented
/// grating with random phase; pixel noise is i.i.d. Gaussian. Labels cycle
/// through the classes and are then shuffled, so counts differ by at most 1.
pub fn synthetic_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    let classes = classes.clamp(1, CLASSES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    labels.shuffle(&mut rng);

    let colour = class_colours(classes);
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    for &l in &labels {
        let k = l as usize;
        let theta = std::f32::consts::PI * k as f32 / classes as f32;
        let (fy, fx) = (theta.sin() * 3.0, theta.cos() * 3.0);
        let phase: f32 = rng.random::<f32>() * std::f32::consts::TAU;
        for c in 0..CHANNELS {
            let base = CIFAR_MEAN[c] + colour[k][c];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let arg = std::f32::consts::TAU * (fy * y as f32 + fx * x as f32) / SIDE as f32 + phase;
                    let noise: f32 = rng.sample(StandardNormal);
                    let v = base + 0.06 * arg.cos() + 0.12 * noise;
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset {
        images,
        labels,
        split: Split::Synthetic,
    }
}

/// Fibonacci-sphere colour offsets of radius 0.12, recentred to mean zero.
fn class_colours(classes: usize) -> Vec<[f32; 3]> {
    let golden = std::f32::consts::PI * (3.0 - 5f32.sqrt());
    let mut pts: Vec<[f32; 3]> = (0..classes)
        .map(|i| {
            let z = if classes == 1 { 0.0 } else { 1.0 - 2.0 * i as f32 / (classes - 1) as f32 };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let a = golden * i as f32;
            [0.12 * r * a.cos(), 0.12 * r * a.sin(), 0.12 * z]
        })
        .collect();
    for c in 0..3 {
        let m = pts.iter().map(|p| p[c]).sum::<f32>() / classes as f32;
        for p in &mut pts {
            p[c] -= m;
        }
    }
    pts
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Crop a 32x32 window at offset `(dy, dx)` from the image reflect-padded by
/// 4 on every side, then optionally mirror it left-right. `dy = dx = 4` with
/// no flip is the identity.
pub fn augment_image(src: &[f32], out: &mut [f32], dy: usize, dx: usize, flip: bool) {
    let plane = SIDE * SIDE;
    for c in 0..CHANNELS {
        let s = &src[c * plane..(c + 1) * plane];
        let o = &mut out[c * plane..(c + 1) * plane];
        for y in 0..SIDE {
            let sy = reflect(y as isize + dy as isize - PAD as isize, SIDE);
            for x in 0..SIDE {
                let xx = if flip { SIDE - 1 - x } else { x };
                let sx = reflect(xx as isize + dx as isize - PAD as isize, SIDE);
                o[y * SIDE + x] = s[sy * SIDE + sx];
            }
        }
    }
}

pub struct Batch<F: Float> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
}

/// Standardized mini-batches over a seeded permutation; the last batch may
/// be short.
pub struct BatchIter<'a, F: Float> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    augment: bool,
    rng: ChaCha8Rng,
    scratch: Vec<f32>,
    _f: std::marker::PhantomData<F>,
}

pub fn batch_iter<F: Float>(ds: &Dataset, batch: usize, shuffle_seed: u64, augment: bool) -> Result<BatchIter<'_, F>> {
    if batch == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    Ok(BatchIter {
        ds,
        order,
        pos: 0,
        batch,
        augment,
        rng,
        scratch: vec![0.0; IMAGE_LEN],
        _f: std::marker::PhantomData,
    })
}

/// Records in their stored order, no augmentation.
pub fn sequential_batches<F: Float>(ds: &Dataset, batch: usize) -> Result<BatchIter<'_, F>> {
    let mut it = batch_iter(ds, batch, 0, false)?;
    it.order = (0..ds.len()).collect();
    Ok(it)
}

impl<F: Float> Iterator for BatchIter<'_, F> {
    type Item = Batch<F>;

    fn next(&mut self) -> Option<Batch<F>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let plane = SIDE * SIDE;
        let mut data = Vec::with_capacity(idx.len() * IMAGE_LEN);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let mut img = self.ds.image(i);
            if self.augment {
                let dy = self.rng.random_range(0..=2 * PAD);
                let dx = self.rng.random_range(0..=2 * PAD);
                let flip = self.rng.random_bool(0.5);
                augment_image(img, &mut self.scratch, dy, dx, flip);
                img = &self.scratch;
            }
            for (k, &p) in img.iter().enumerate() {
                data.push(F::of(standardize(p, k / plane) as f64));
            }
            labels.push(self.ds.labels[i] as usize);
        }
        let images = Tensor::from_vec(&[idx.len(), CHANNELS, SIDE, SIDE], data).expect("batch shape");
        Some(Batch { images, labels })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch);
        (n, Some(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 32), 1);
        assert_eq!(reflect(-4, 32), 4);
        assert_eq!(reflect(32, 32), 30);
        assert_eq!(reflect(35, 32), 27);
        assert_eq!(reflect(7, 32), 7);
    }

    #[test]
    fn centred_crop_without_flip_is_identity() {
        let ds = synthetic_dataset(1, 2, 3);
        let mut out = vec![0.0; IMAGE_LEN];
        augment_image(ds.image(0), &mut out, PAD, PAD, false);
        assert_eq!(out, ds.image(0));
    }

    #[test]
    fn record_layout() {
        let ds = synthetic_dataset(3, 10, 1);
        let bytes = encode_records(&ds);
        assert_eq!(bytes.len(), 3 * RECORD_BYTES);
        assert_eq!(bytes[RECORD_BYTES], ds.labels[1]);
        assert_eq!(bytes[1], (ds.images[0] * 255.0).round() as u8);
    }
}
