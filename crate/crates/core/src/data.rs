//! Image datasets: CIFAR binary records, a synthetic generator, augmentation.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
/// One label byte followed by a 3×32×32 channel-major image.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// 8-bit images stored channel-major, one after another.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(channels: usize, side: usize, classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let image = channels * side * side;
        if image == 0 || classes == 0 {
            return Err(Error::Data("empty image geometry or class count".into()));
        }
        if pixels.len() != image * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel bytes for {} images of {image} bytes",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            channels,
            side,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    /// The first `count` images.
    pub fn truncate(mut self, count: usize) -> Self {
        let count = count.min(self.len());
        self.pixels.truncate(count * self.image_len());
        self.labels.truncate(count);
        self
    }

    /// Selected images scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor4<f64> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| f64::from(p) / 255.0));
        }
        Tensor4::from_vec([indices.len(), self.channels, self.side, self.side], data)
            .expect("batch dims follow the dataset geometry")
    }

    /// Selected images with augmentation applied, scaled to `[0, 1]`.
    pub fn augmented_batch<R: Rng>(&self, indices: &[usize], aug: Augment, rng: &mut R) -> Tensor4<f64> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            let img = augment_image(self.image(i), self.channels, self.side, aug, rng);
            data.extend(img.iter().map(|&p| f64::from(p) / 255.0));
        }
        Tensor4::from_vec([indices.len(), self.channels, self.side, self.side], data)
            .expect("batch dims follow the dataset geometry")
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(count);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(CIFAR_CHANNELS, CIFAR_SIDE, 10, pixels, labels)
}

pub fn load_cifar_files(dir: &Path, names: &[&str]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for name in names {
        let path = dir.join(name);
        let chunk = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        bytes.extend(chunk);
    }
    parse_cifar(&bytes)
}

pub fn load_cifar_train(dir: &Path) -> Result<Dataset> {
    load_cifar_files(dir, &CIFAR_TRAIN_FILES)
}

pub fn load_cifar_test(dir: &Path) -> Result<Dataset> {
    load_cifar_files(dir, &[CIFAR_TEST_FILE])
}

/// Parameters of the synthetic colour-blob dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub classes: usize,
    pub channels: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 200,
            classes: 2,
            channels: 3,
            side: 8,
            seed: 0,
        }
    }
}

/// Per-class colour of the synthetic prototypes.
pub fn prototype_level(class: usize, classes: usize, channel: usize) -> f64 {
    use std::f64::consts::TAU;
    128.0 + 80.0 * (TAU * class as f64 / classes as f64 + TAU * channel as f64 / 3.0).cos()
}

/// Balanced classes of uniform-noise images around a per-class colour.
/// Labels cycle `0, 1, …, classes − 1`.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    use rand::SeedableRng;
    if spec.count == 0 {
        return Err(Error::Data("synthetic dataset needs at least one image".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let plane = spec.side * spec.side;
    let mut pixels = Vec::with_capacity(spec.count * spec.channels * plane);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.classes;
        for c in 0..spec.channels {
            let base = prototype_level(class, spec.classes, c);
            for _ in 0..plane {
                let v = base + rng.random_range(-60.0..=60.0);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(class);
    }
    Dataset::new(spec.channels, spec.side, spec.classes, pixels, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub pad_crop: bool,
    pub flip: bool,
}

pub const CROP_PAD: usize = 4;

/// Crops a `side × side` window at `(dy, dx)` out of the image zero-padded by
/// [`CROP_PAD`] on every side. `(4, 4)` is the identity.
pub fn pad_crop(img: &[u8], channels: usize, side: usize, dy: usize, dx: usize) -> Vec<u8> {
    assert!(dy <= 2 * CROP_PAD && dx <= 2 * CROP_PAD);
    let mut out = vec![0u8; img.len()];
    for c in 0..channels {
        for y in 0..side {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let sx = (x + dx) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= side as isize {
                    continue;
                }
                out[(c * side + y) * side + x] = img[(c * side + sy as usize) * side + sx as usize];
            }
        }
    }
    out
}

pub fn hflip(img: &[u8], channels: usize, side: usize) -> Vec<u8> {
    let mut out = img.to_vec();
    for c in 0..channels {
        for y in 0..side {
            let row = (c * side + y) * side;
            out[row..row + side].reverse();
        }
    }
    out
}

/// Random pad-and-crop followed by a horizontal flip with probability 1/2.
pub fn augment_image<R: Rng>(img: &[u8], channels: usize, side: usize, aug: Augment, rng: &mut R) -> Vec<u8> {
    let mut out = if aug.pad_crop {
        let dy = rng.random_range(0..=2 * CROP_PAD);
        let dx = rng.random_range(0..=2 * CROP_PAD);
        pad_crop(img, channels, side, dy, dx)
    } else {
        img.to_vec()
    };
    if aug.flip && rng.random_bool(0.5) {
        out = hflip(&out, channels, side);
    }
    out
}
