//! Synthetic IDX datasets for tests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dalebp-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn images_idx(n: usize, pixels: &[u8]) -> Vec<u8> {
    let mut v = Vec::new();
    for x in [0x0000_0803u32, n as u32, 28, 28] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

pub fn labels_idx(labels: &[u8]) -> Vec<u8> {
    let mut v = Vec::new();
    for x in [0x0000_0801u32, labels.len() as u32] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    v.extend_from_slice(labels);
    v
}

/// Class `k` lights up row band `k`, plus noise, so the task is learnable.
fn split(rng: &mut ChaCha8Rng, n: usize) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..10u8);
        labels.push(k);
        for p in 0..784 {
            let band = (p / 28) / 3 == k as usize;
            let base: u8 = if band { 200 } else { 0 };
            pixels.push(base.saturating_add(rng.random_range(0..40)));
        }
    }
    (pixels, labels)
}

pub fn write_mnist(dir: &Path, n_train: usize, n_test: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
        let (px, lb) = split(&mut rng, n);
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images_idx(n, &px)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels_idx(&lb)).unwrap();
    }
}
