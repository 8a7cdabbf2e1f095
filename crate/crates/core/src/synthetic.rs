//! Deterministic stand-in for the chest X-ray archive.
//!
//! Renders 28x28 frontal-chest-like images: a soft thorax silhouette, two dark
//! lung fields crossed by rib shadows, a bright mediastinum, per-subject
//! anatomy and exposure jitter. Pneumonia cases add patchy lung opacities
//! whose severity varies from clearly visible to nearly absent, so the two
//! classes overlap. Split sizes and class ratios follow the public archive
//! (train 1,214/3,494, val 135/389, test 234/390 normal/pneumonia).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{RawDataset, Split};
use crate::model::{IMAGE_PIXELS, IMAGE_SIDE};

/// `(normal, pneumonia)` counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurrogateLayout {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl SurrogateLayout {
    pub const PNEUMONIAMNIST: SurrogateLayout = SurrogateLayout {
        train: (1_214, 3_494),
        val: (135, 389),
        test: (234, 390),
    };

    /// Same class ratios, every count divided by `factor` (at least one per class).
    pub fn scaled_down(factor: usize) -> SurrogateLayout {
        let f = |(a, b): (usize, usize)| ((a / factor).max(1), (b / factor).max(1));
        let full = Self::PNEUMONIAMNIST;
        SurrogateLayout {
            train: f(full.train),
            val: f(full.val),
            test: f(full.test),
        }
    }
}

struct Lung {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Lung {
    /// 1 deep inside, 0 outside, smooth over the rim.
    fn mask(&self, u: f64, v: f64) -> f64 {
        let d = ((u - self.cx) / self.rx).powi(2) + ((v - self.cy) / self.ry).powi(2);
        smoothstep(1.15, 0.85, d)
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render(label: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let jitter = Normal::new(0.0, 1.0).unwrap();
    let body_w = rng.gen_range(0.78..0.95);
    let body_h = rng.gen_range(0.88..1.02);
    let cx = 0.04 * jitter.sample(rng);
    let cy = 0.04 * jitter.sample(rng);
    let sep = rng.gen_range(0.36..0.46);
    let lung_rx = rng.gen_range(0.26..0.34);
    let lung_ry = rng.gen_range(0.52..0.66);
    let lungs = [
        Lung {
            cx: cx - sep,
            cy: cy - 0.05,
            rx: lung_rx * rng.gen_range(0.92..1.08),
            ry: lung_ry,
        },
        Lung {
            cx: cx + sep,
            cy: cy - 0.05,
            rx: lung_rx * rng.gen_range(0.92..1.08),
            ry: lung_ry * rng.gen_range(0.9..1.0),
        },
    ];
    let rib_freq = rng.gen_range(5.0..7.0);
    let rib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tissue = rng.gen_range(0.48..0.62);
    let lung_level = rng.gen_range(0.12..0.24);
    let exposure = rng.gen_range(0.88..1.12);
    let gamma = rng.gen_range(0.85..1.15);

    // (center u, center v, sigma, amplitude)
    let mut blobs: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut haze = [0.0f64; 2];
    if label == 1 {
        let severity: f64 = if rng.gen_bool(0.15) {
            rng.gen_range(0.0..0.15)
        } else {
            rng.gen_range(0.2..1.0)
        };
        let both = rng.gen_bool(0.4);
        let first = rng.gen_range(0..2);
        for (i, lung) in lungs.iter().enumerate() {
            if !(both || i == first) {
                continue;
            }
            haze[i] = 0.08 * severity;
            for _ in 0..rng.gen_range(1..=3) {
                let bu = lung.cx + rng.gen_range(-0.6..0.6) * lung.rx;
                let bv = lung.cy + rng.gen_range(-0.5..0.7) * lung.ry;
                let sigma = rng.gen_range(0.10..0.26);
                blobs.push((bu, bv, sigma, 0.32 * severity * rng.gen_range(0.7..1.3)));
            }
        }
    } else if rng.gen_bool(0.2) {
        let lung = &lungs[rng.gen_range(0..2)];
        let bu = lung.cx + rng.gen_range(-0.5..0.5) * lung.rx;
        let bv = lung.cy + rng.gen_range(-0.5..0.5) * lung.ry;
        blobs.push((bu, bv, rng.gen_range(0.05..0.12), rng.gen_range(0.0..0.12)));
    }

    let pixel_noise = Normal::new(0.0, 0.03).unwrap();
    let mut out = Vec::with_capacity(IMAGE_PIXELS);
    let half = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let u = (x as f64 - half) / half;
            let v = (y as f64 - half) / half;
            let body_d = ((u - cx) / body_w).powi(2) + ((v - cy - 0.1) / body_h).powi(2);
            let body = smoothstep(1.1, 0.8, body_d);
            let mut val = 0.05 + body * (tissue - 0.05);

            let mut lung_total = 0.0;
            for (i, lung) in lungs.iter().enumerate() {
                let m = lung.mask(u, v);
                lung_total += m;
                let rib = 0.07 * ((v * rib_freq * std::f64::consts::PI + rib_phase).sin()).max(0.0);
                val += m * ((lung_level - val) + rib + haze[i]);
            }
            let mediastinum = smoothstep(0.16, 0.08, (u - cx).abs()) * smoothstep(-0.75, -0.55, v);
            val += mediastinum * (0.78 - val) * (1.0 - lung_total).clamp(0.0, 1.0);

            for &(bu, bv, sigma, amp) in &blobs {
                let d2 = (u - bu).powi(2) + (v - bv).powi(2);
                val += amp * (-d2 / (2.0 * sigma * sigma)).exp() * lung_total.min(1.0);
            }
            val = (val * exposure).clamp(0.0, 1.0).powf(gamma) + pixel_noise.sample(rng);
            out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn split(counts: (usize, usize), rng: &mut ChaCha8Rng) -> Split {
    let mut labels: Vec<u8> = std::iter::repeat(0u8)
        .take(counts.0)
        .chain(std::iter::repeat(1u8).take(counts.1))
        .collect();
    labels.shuffle(rng);
    let mut images = Vec::with_capacity(labels.len() * IMAGE_PIXELS);
    for &l in &labels {
        images.extend(render(l, rng));
    }
    Split { images, labels }
}

/// Generates the surrogate dataset for `layout` from `seed`.
pub fn generate(layout: SurrogateLayout, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = split(layout.train, &mut rng);
    let val = split(layout.val, &mut rng);
    let test = split(layout.test, &mut rng);
    RawDataset { train, val, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_are_exact() {
        let ds = generate(SurrogateLayout::scaled_down(20), 1);
        assert_eq!(ds.train.class_counts(), [60, 174]);
        assert_eq!(ds.test.class_counts(), [11, 19]);
        assert_eq!(ds.train.images.len(), ds.train.len() * IMAGE_PIXELS);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(SurrogateLayout::scaled_down(50), 3);
        assert_eq!(a, generate(SurrogateLayout::scaled_down(50), 3));
        assert_ne!(a, generate(SurrogateLayout::scaled_down(50), 4));
    }

    #[test]
    fn pneumonia_is_brighter_in_lungs_on_average() {
        let ds = generate(SurrogateLayout::scaled_down(10), 5);
        let mean = |cls: u8| {
            let (mut total, mut n) = (0.0f64, 0usize);
            for i in 0..ds.train.len() {
                if ds.train.labels[i] == cls {
                    total += ds.train.image(i).iter().map(|&b| b as f64).sum::<f64>();
                    n += 1;
                }
            }
            total / n as f64
        };
        assert!(mean(1) > mean(0));
    }
}
