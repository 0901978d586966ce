#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectrum_xai::data::{prepare_segments, synth_generate, SegmentationConfig, SpectrogramSegment, SynthConfig, SynthOutput};
use spectrum_xai::linalg::Matrix;
use spectrum_xai::nn::{ArchConfig, Tensor};
use spectrum_xai::trainer::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Desk-geometry synthetic data with `tiles_per_region` time steps.
pub fn desk_data(tiles_per_region: usize, seed: u64) -> (SynthOutput, Vec<SpectrogramSegment>) {
    let mut c = SynthConfig::desk(seed);
    c.duration = tiles_per_region * c.window;
    let out = synth_generate(&c).unwrap();
    let segs = prepare_segments(
        &out.matrix,
        &SegmentationConfig {
            window: c.window,
            ..Default::default()
        },
    )
    .unwrap();
    (out, segs)
}

/// Small network and short schedule for invariant checks.
pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_total: 6,
        clustering_cycle: 3,
        k: 4,
        reduction: spectrum_xai::pca::Reduction::Fixed(4),
        batch_size: 32,
        seed,
        arch: ArchConfig {
            channels: vec![4, 8],
            feature_dim: 16,
        },
        ..TrainConfig::default()
    }
}

/// Gaussian blobs around `centers`, `per` points each, labels in order.
pub fn blobs(centers: &[Vec<f64>], per: usize, std: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.push(center.iter().map(|&m| m + r.sample(normal)).collect());
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}
