//! Fixtures shared by the kernel benchmarks.

use std::sync::Arc;

use pneumonet_core::buffer::StoredSample;
use pneumonet_core::model::{IMAGE_PIXELS, IMAGE_SIDE};
use pneumonet_core::Tensor;

/// Deterministic pseudo-image batch `[n,1,28,28]` with alternating labels.
pub fn image_batch(n: usize) -> (Tensor<f32>, Vec<usize>) {
    let data: Vec<f32> = (0..n * IMAGE_PIXELS)
        .map(|i| ((i * 7919) % 251) as f32 / 251.0)
        .collect();
    let labels = (0..n).map(|i| i % 2).collect();
    (
        Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("batch shape"),
        labels,
    )
}

/// `n` stored samples with alternating labels, for memory benchmarks.
pub fn samples(n: usize) -> Vec<StoredSample> {
    let image: Arc<[f32]> = Arc::from(vec![0.5f32; IMAGE_PIXELS]);
    (0..n)
        .map(|i| StoredSample::new(Arc::clone(&image), (i % 2) as u8, 0, i as u64))
        .collect()
}
