//! Dataset ingestion, batching, augmentation and checkpoint persistence.

mod checkpoint;
mod loaders;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loaders::{
    encode_cifar_records, load_cifar10, load_mnist, parse_cifar_records, parse_idx_images,
    parse_idx_labels, CIFAR_RECORD, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "AFA_DATA_DIR";

/// Data root: `$AFA_DATA_DIR`, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar10Subset,
}

impl DatasetName {
    pub const NAMES: [&'static str; 3] = ["mnist", "cifar10", "cifar10-subset"];

    pub fn name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar10Subset => "cifar10-subset",
        }
    }

    pub fn parse(s: &str) -> Result<DatasetName> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            "cifar10-subset" => Ok(DatasetName::Cifar10Subset),
            _ => Err(Error::Config(format!(
                "unknown dataset {s:?}; valid: {}",
                DatasetName::NAMES.join(", ")
            ))),
        }
    }

    /// Directory under the data root holding this dataset's files.
    pub fn subdir(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 | DatasetName::Cifar10Subset => "cifar-10-batches-bin",
        }
    }

    /// Crop-and-flip augmentation applies to CIFAR-10 only.
    pub fn augments(self) -> bool {
        self != DatasetName::Mnist
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images stored as bytes; pixel value is `byte / 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: DatasetName,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: DatasetName,
        split: Split,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Dataset> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixel bytes do not split into {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            name,
            split,
            channels,
            height,
            width,
            num_classes,
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// The first `n` records (or all, if fewer).
    pub fn first(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// `len(indices) x C x H x W` tensor of the selected images.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("sizes follow from the dataset shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Deterministic partition into batches; see [`batch_indices`].
    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Batch> {
        batch_indices(self.len(), batch_size, seed, shuffle)
            .into_iter()
            .map(|idx| Batch {
                x: self.images(&idx),
                labels: self.labels_of(&idx),
                indices: idx,
            })
            .collect()
    }

    /// Class counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Splits `0..n` into batches of `batch_size` (the last may be short),
/// shuffled by a ChaCha8 stream seeded with `seed` when `shuffle` is set.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let bs = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(bs).map(|c| c.to_vec()).collect()
}

/// Zero-pad by 4, crop back to size at a random offset, and flip
/// horizontally with probability 1/2, independently per image.
pub fn augment_crop_flip(x: &mut Tensor, rng: &mut ChaCha8Rng) {
    const PAD: usize = 4;
    let s = x.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    for i in 0..n {
        let dy = rng.random_range(0..=2 * PAD);
        let dx = rng.random_range(0..=2 * PAD);
        let flip = rng.random_bool(0.5);
        let img = &mut x.data_mut()[i * per..(i + 1) * per];
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for xo in 0..w {
                    let sy = (y + dy) as isize - PAD as isize;
                    let xi = if flip { w - 1 - xo } else { xo };
                    let sx = (xi + dx) as isize - PAD as isize;
                    let inside = sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w;
                    img[(ch * h + y) * w + xo] = if inside {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}
