//! The five shifted acquisition domains built from one raw dataset.
//!
//! Every transform draws its randomness from a generator seeded by
//! `(global_seed, domain, split, sample_index)`, so a sample's transformed
//! pixels do not depend on which other samples are processed or in what order.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{RawDataset, Split};
use crate::model::{IMAGE_PIXELS, IMAGE_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Base,
    LowDose,
    Portable,
    Anatomical,
    Institutional,
}

impl DomainKind {
    /// Training order of the benchmark.
    pub const SEQUENCE: [DomainKind; 5] = [
        DomainKind::Base,
        DomainKind::LowDose,
        DomainKind::Portable,
        DomainKind::Anatomical,
        DomainKind::Institutional,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Base => "Base",
            DomainKind::LowDose => "LowDose",
            DomainKind::Portable => "Portable",
            DomainKind::Anatomical => "Anatomical",
            DomainKind::Institutional => "Institutional",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Magnitudes of the domain transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformParams {
    pub lowdose_scale: f64,
    pub lowdose_noise_sigma: f64,
    pub portable_brightness: f64,
    pub portable_blur_sigma: f64,
    pub anatomical_max_shift: i64,
    pub anatomical_scale_min: f64,
    pub anatomical_scale_max: f64,
    pub institutional_contrast: f64,
    pub institutional_pivot: f64,
    pub institutional_brightness: f64,
    pub institutional_sharpen: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams {
            lowdose_scale: 0.7,
            lowdose_noise_sigma: 0.08,
            portable_brightness: 0.10,
            portable_blur_sigma: 0.8,
            anatomical_max_shift: 2,
            anatomical_scale_min: 0.9,
            anatomical_scale_max: 1.1,
            institutional_contrast: 1.3,
            institutional_pivot: 0.5,
            institutional_brightness: 0.05,
            institutional_sharpen: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub params: TransformParams,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, params: TransformParams) -> Self {
        DomainSpec { kind, params }
    }

    pub fn id(&self) -> u8 {
        self.kind.id()
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// A transformed split: float images in `[0, 1]` plus untouched labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainSplit {
    pub images: Vec<Arc<[f32]>>,
    pub labels: Vec<u8>,
}

impl DomainSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub train: DomainSplit,
    pub test: DomainSplit,
}

impl DomainDataset {
    pub fn id(&self) -> u8 {
        self.spec.id()
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train = 0,
    Val = 1,
    Test = 2,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the generator used for one sample's transform.
pub fn sample_seed(global_seed: u64, domain_id: u8, split: SplitKind, index: usize) -> u64 {
    let mut h = splitmix(global_seed);
    h = splitmix(h ^ domain_id as u64);
    h = splitmix(h ^ split as u64);
    splitmix(h ^ index as u64)
}

/// Normalized 3-tap Gaussian.
pub fn gaussian_kernel3(sigma: f64) -> [f32; 3] {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let total = 1.0 + 2.0 * side;
    [(side / total) as f32, (1.0 / total) as f32, (side / total) as f32]
}

/// Separable 3x3 blur with edge replication, so constant images are unchanged.
pub fn blur3(img: &[f32], kernel: [f32; 3]) -> Vec<f32> {
    let n = IMAGE_SIDE;
    let at = |v: &[f32], y: isize, x: isize| {
        let y = y.clamp(0, n as isize - 1) as usize;
        let x = x.clamp(0, n as isize - 1) as usize;
        v[y * n + x]
    };
    let mut tmp = vec![0.0f32; IMAGE_PIXELS];
    for y in 0..n as isize {
        for x in 0..n as isize {
            tmp[y as usize * n + x as usize] = kernel[0] * at(img, y, x - 1)
                + kernel[1] * at(img, y, x)
                + kernel[2] * at(img, y, x + 1);
        }
    }
    let mut out = vec![0.0f32; IMAGE_PIXELS];
    for y in 0..n as isize {
        for x in 0..n as isize {
            out[y as usize * n + x as usize] = kernel[0] * at(&tmp, y - 1, x)
                + kernel[1] * at(&tmp, y, x)
                + kernel[2] * at(&tmp, y + 1, x);
        }
    }
    out
}

/// Translates by `(dx, dy)` pixels and scales about the image center, with
/// bilinear resampling and zero fill outside the source.
pub fn affine(img: &[f32], dx: f64, dy: f64, scale: f64) -> Vec<f32> {
    let n = IMAGE_SIDE;
    let center = (n as f64 - 1.0) / 2.0;
    let sample = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
            0.0
        } else {
            img[y as usize * n + x as usize] as f64
        }
    };
    let mut out = vec![0.0f32; IMAGE_PIXELS];
    for oy in 0..n {
        for ox in 0..n {
            let sy = center + (oy as f64 - center - dy) / scale;
            let sx = center + (ox as f64 - center - dx) / scale;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * (1.0 - fx) * sample(y0, x0)
                + (1.0 - fy) * fx * sample(y0, x0 + 1)
                + fy * (1.0 - fx) * sample(y0 + 1, x0)
                + fy * fx * sample(y0 + 1, x0 + 1);
            out[oy * n + ox] = v as f32;
        }
    }
    out
}

fn clamp01(img: &mut [f32]) {
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Transforms one normalized image in place of a copy.
pub fn transform_image(pixels: &[f32], spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let p = &spec.params;
    let mut img = pixels.to_vec();
    match spec.kind {
        DomainKind::Base => {}
        DomainKind::LowDose => {
            let scale = p.lowdose_scale as f32;
            if p.lowdose_noise_sigma > 0.0 {
                let noise = Normal::new(0.0, p.lowdose_noise_sigma).expect("sigma is finite");
                img.iter_mut()
                    .for_each(|v| *v = *v * scale + noise.sample(rng) as f32);
            } else {
                img.iter_mut().for_each(|v| *v *= scale);
            }
        }
        DomainKind::Portable => {
            let shift = if p.portable_brightness > 0.0 {
                rng.gen_range(-p.portable_brightness..=p.portable_brightness) as f32
            } else {
                0.0
            };
            img.iter_mut().for_each(|v| *v += shift);
            if p.portable_blur_sigma > 0.0 {
                img = blur3(&img, gaussian_kernel3(p.portable_blur_sigma));
            }
        }
        DomainKind::Anatomical => {
            let m = p.anatomical_max_shift;
            let dx = rng.gen_range(-m..=m) as f64;
            let dy = rng.gen_range(-m..=m) as f64;
            let scale = if p.anatomical_scale_max > p.anatomical_scale_min {
                rng.gen_range(p.anatomical_scale_min..=p.anatomical_scale_max)
            } else {
                p.anatomical_scale_min
            };
            img = affine(&img, dx, dy, scale);
        }
        DomainKind::Institutional => {
            let pivot = p.institutional_pivot as f32;
            let contrast = p.institutional_contrast as f32;
            let bright = p.institutional_brightness as f32;
            img.iter_mut()
                .for_each(|v| *v = (*v - pivot) * contrast + pivot + bright);
            if p.institutional_sharpen != 0.0 {
                let blurred = blur3(&img, gaussian_kernel3(p.portable_blur_sigma.max(1e-3)));
                let amount = p.institutional_sharpen as f32;
                for (v, b) in img.iter_mut().zip(blurred) {
                    *v += amount * (*v - b);
                }
            }
        }
    }
    clamp01(&mut img);
    img
}

/// Normalizes `raw` to `[0, 1]` and applies `spec` to one sample.
pub fn transform_sample(
    split: &Split,
    index: usize,
    spec: &DomainSpec,
    kind: SplitKind,
    global_seed: u64,
) -> Vec<f32> {
    let pixels: Vec<f32> = split.image(index).iter().map(|&b| b as f32 / 255.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global_seed, spec.id(), kind, index));
    transform_image(&pixels, spec, &mut rng)
}

fn transform_split(split: &Split, spec: &DomainSpec, kind: SplitKind, global_seed: u64) -> DomainSplit {
    DomainSplit {
        images: (0..split.len())
            .map(|i| Arc::from(transform_sample(split, i, spec, kind, global_seed)))
            .collect(),
        labels: split.labels.clone(),
    }
}

/// Builds one domain's train and test splits. With `merge_val` the validation
/// split is appended to training data.
pub fn apply_domain(raw: &RawDataset, spec: &DomainSpec, global_seed: u64, merge_val: bool) -> DomainDataset {
    let mut train = transform_split(&raw.train, spec, SplitKind::Train, global_seed);
    if merge_val {
        let val = transform_split(&raw.val, spec, SplitKind::Val, global_seed);
        train.images.extend(val.images);
        train.labels.extend(val.labels);
    }
    DomainDataset {
        spec: spec.clone(),
        train,
        test: transform_split(&raw.test, spec, SplitKind::Test, global_seed),
    }
}

/// Base, LowDose, Portable, Anatomical, Institutional, in that order.
pub fn make_domain_sequence(
    raw: &RawDataset,
    params: &TransformParams,
    global_seed: u64,
    merge_val: bool,
) -> Vec<DomainDataset> {
    DomainKind::SEQUENCE
        .iter()
        .map(|&kind| apply_domain(raw, &DomainSpec::new(kind, params.clone()), global_seed, merge_val))
        .collect()
}
