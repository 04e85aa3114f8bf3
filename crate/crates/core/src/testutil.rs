use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetName, Split};
use crate::nn::{build_model, Arch, Model};

/// Three classes of 1x8x8 images: a bright left half, a bright right half,
/// or a bright centre, with pixel noise.
pub fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 3;
        for r in 0..8 {
            for c in 0..8 {
                let on = match y {
                    0 => c < 4,
                    1 => c >= 4,
                    _ => (2..6).contains(&r) && (2..6).contains(&c),
                };
                let base: i32 = if on { 190 } else { 60 };
                pixels.push((base + rng.random_range(-50..=50)).clamp(0, 255) as u8);
            }
        }
        labels.push(y);
    }
    Dataset::new(DatasetName::Mnist, Split::Train, 1, 8, 8, 3, pixels, labels).unwrap()
}

pub fn toy_arch(k: usize) -> Arch {
    Arch::compact(1, 8, 3, k)
}

pub fn toy_model(k: usize, seed: u64) -> Model {
    build_model(&toy_arch(k), seed).unwrap()
}
