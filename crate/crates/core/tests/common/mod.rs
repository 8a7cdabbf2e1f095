//! Oracles shared by the integration suites.
#![allow(dead_code)]

use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use pneumonet_core::buffer::{DualStageBuffer, ReplayMemory, ReservoirBuffer, StoredSample};
use pneumonet_core::model::{Layer, IMAGE_PIXELS, IMAGE_SIDE};
use pneumonet_core::tensor::{grad_check, Padding};
use pneumonet_core::training::compute_class_weights;
use pneumonet_core::{Model, ModelSpec, Result, Tape, Tensor, Var};

pub const EPS: f64 = 1e-3;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` apart in random order, so no finite-difference probe
/// crosses a max-pooling tie.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * gap - n as f64 * gap / 2.0).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Uniform magnitudes in `[margin, 1]` with random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(flatten(x) * probe)`, giving every output element a random upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var, probe: &Tensor<f64>) -> Result<Var> {
    let flat = tape.flatten(x)?;
    let w = tape.leaf(probe.clone());
    let b = tape.leaf(Tensor::zeros(vec![1]));
    let y = tape.linear(flat, w, b)?;
    tape.sum(y)
}

/// Worst relative error per op over `trials` random instances.
pub fn op_gradchecks(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![
        ("conv2d_valid", 0.0f64),
        ("conv2d_same", 0.0),
        ("maxpool2x2", 0.0),
        ("relu", 0.0),
        ("linear", 0.0),
        ("flatten", 0.0),
        ("sum", 0.0),
        ("weighted_softmax_cross_entropy", 0.0),
    ];
    let mut record = |name: &str, err: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = slot.1.max(err);
    };
    for _ in 0..trials {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let f = rng.gen_range(1..=3);
        let side = rng.gen_range(3..=6);
        for padding in [Padding::Valid, Padding::Same] {
            let x = uniform(&mut rng, &[n, c, side, side], -1.0, 1.0);
            let k = uniform(&mut rng, &[f, c, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[f], -1.0, 1.0);
            let out_side = padding.output_extent(side).unwrap();
            let probe = uniform(&mut rng, &[f * out_side * out_side, 1], -1.0, 1.0);
            let r = grad_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], padding)?;
                    project(t, y, &probe)
                },
                &[x, k, b],
                EPS,
            )
            .unwrap();
            let name = if padding == Padding::Valid { "conv2d_valid" } else { "conv2d_same" };
            record(name, r.max_relative_error);
        }

        let ph = rng.gen_range(2..=5);
        let x = distinct(&mut rng, &[n, c, ph, ph + 1], 0.05);
        let probe = uniform(&mut rng, &[c * (ph / 2) * ((ph + 1) / 2), 1], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let y = t.maxpool2x2(v[0])?;
                project(t, y, &probe)
            },
            &[x],
            EPS,
        )
        .unwrap();
        record("maxpool2x2", r.max_relative_error);

        let x = away_from_zero(&mut rng, &[n, 7], 0.05);
        let probe = uniform(&mut rng, &[7, 1], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, &probe)
            },
            &[x],
            EPS,
        )
        .unwrap();
        record("relu", r.max_relative_error);

        let (d, u) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
        let x = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let w = uniform(&mut rng, &[d, u], -1.0, 1.0);
        let b = uniform(&mut rng, &[u], -1.0, 1.0);
        let probe = uniform(&mut rng, &[u, 1], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, &probe)
            },
            &[x, w, b],
            EPS,
        )
        .unwrap();
        record("linear", r.max_relative_error);

        let x = uniform(&mut rng, &[n, c, 2, 3], -1.0, 1.0);
        let probe = uniform(&mut rng, &[c * 6, 1], -1.0, 1.0);
        let r = grad_check(|t, v| project(t, v[0], &probe), &[x.clone()], EPS).unwrap();
        record("flatten", r.max_relative_error);
        let r = grad_check(|t, v| t.sum(v[0]), &[x], EPS).unwrap();
        record("sum", r.max_relative_error);

        let rows = rng.gen_range(1..=8);
        let classes = rng.gen_range(2..=4);
        let logits = uniform(&mut rng, &[rows, classes], -3.0, 3.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        let weights = compute_class_weights(&labels, classes).unwrap().weights;
        let r = grad_check(
            |t, v| t.weighted_softmax_cross_entropy(v[0], &labels, &weights),
            &[logits],
            EPS,
        )
        .unwrap();
        record("weighted_softmax_cross_entropy", r.max_relative_error);
    }
    worst
}

/// Loss plus the activation pattern: ReLU on/off masks and max-pool
/// winners, recorded layer by layer.
fn pneumonet_loss(
    spec: &ModelSpec,
    values: &[Tensor<f64>],
    labels: &[usize],
    weights: &[f64],
    grad_of: Option<usize>,
) -> (f64, Vec<u32>, Option<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = values
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = t.clone();
            tape.leaf(if grad_of == Some(i) { t.requiring_grad() } else { t })
        })
        .collect();
    let (params, input) = vars.split_at(vars.len() - 1);
    let mut next = params.iter().copied();
    let mut x = input[0];
    let mut pattern = Vec::new();
    for layer in spec.layers() {
        x = match *layer {
            Layer::Conv { padding, .. } => {
                let (k, b) = (next.next().unwrap(), next.next().unwrap());
                tape.conv2d(x, k, b, padding).unwrap()
            }
            Layer::Relu => {
                let y = tape.relu(x).unwrap();
                pattern.extend(tape.value(y).data().iter().map(|&v| u32::from(v > 0.0)));
                y
            }
            Layer::MaxPool => {
                let v = tape.value(x);
                let s = v.shape().to_vec();
                let (h, w) = (s[2], s[3]);
                for plane in v.data().chunks(h * w) {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut best = 0u32;
                            let mut best_v = f64::NEG_INFINITY;
                            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                                let val = plane[(2 * oy + dy) * w + 2 * ox + dx];
                                if val > best_v {
                                    best_v = val;
                                    best = k as u32;
                                }
                            }
                            pattern.push(best);
                        }
                    }
                }
                tape.maxpool2x2(x).unwrap()
            }
            Layer::Flatten => tape.flatten(x).unwrap(),
            Layer::Linear { .. } => {
                let (w, b) = (next.next().unwrap(), next.next().unwrap());
                tape.linear(x, w, b).unwrap()
            }
        };
    }
    let loss = tape.weighted_softmax_cross_entropy(x, labels, weights).unwrap();
    let value = tape.value(loss).item().unwrap();
    let grad = grad_of.map(|i| {
        tape.backward(loss).unwrap();
        tape.grad(vars[i]).unwrap().to_vec()
    });
    (value, pattern, grad)
}

#[derive(Clone, Debug, Default)]
pub struct EndToEnd {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Accepted probes per tensor: parameters in order, then the input.
    pub checked_per_tensor: Vec<usize>,
    /// Probes skipped because a ReLU or pooling decision flipped inside
    /// `[x - eps, x + eps]`, where the loss is not differentiable.
    pub skipped: usize,
}

/// Central differences of the full PneumoNet weighted loss on 2-sample
/// batches: `per_input` random coordinates of every parameter tensor and of
/// the input per trial.
pub fn end_to_end_gradcheck(trials: usize, per_input: usize, seed: u64) -> EndToEnd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec::pneumonet();
    let mut out = EndToEnd::default();
    for _ in 0..trials {
        let model = Model::build(spec.clone(), rng.gen());
        let mut values: Vec<Tensor<f64>> = model.parameters().iter().map(|p| p.cast::<f64>()).collect();
        for (name, t) in model.parameter_names().iter().zip(values.iter_mut()) {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        values.push(uniform(&mut rng, &[2, 1, IMAGE_SIDE, IMAGE_SIDE], 0.0, 1.0));
        let labels = vec![rng.gen_range(0..2), rng.gen_range(0..2)];
        let weights = compute_class_weights(&labels, 2).unwrap().weights;
        let (_, base_pattern, _) = pneumonet_loss(&spec, &values, &labels, &weights, None);
        out.checked_per_tensor.resize(values.len(), 0);
        for which in 0..values.len() {
            let (_, _, grad) = pneumonet_loss(&spec, &values, &labels, &weights, Some(which));
            let grad = grad.unwrap();
            let mut coords: Vec<usize> = (0..grad.len()).collect();
            coords.shuffle(&mut rng);
            let mut accepted = 0;
            for c in coords {
                if accepted == per_input {
                    break;
                }
                let original = values[which].data()[c];
                values[which].data_mut()[c] = original + EPS;
                let (plus, p_plus, _) = pneumonet_loss(&spec, &values, &labels, &weights, None);
                values[which].data_mut()[c] = original - EPS;
                let (minus, p_minus, _) = pneumonet_loss(&spec, &values, &labels, &weights, None);
                values[which].data_mut()[c] = original;
                if p_plus != base_pattern || p_minus != base_pattern {
                    out.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * EPS);
                let a = grad[c];
                let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                out.max_relative_error = out.max_relative_error.max(rel);
                out.checked += 1;
                out.checked_per_tensor[which] += 1;
                accepted += 1;
            }
        }
    }
    out
}

/// Largest `|tape - brute force|` of the weighted loss over random batches.
pub fn weighted_loss_oracle(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let n = rng.gen_range(1..=64);
        let classes = 2;
        let logits: Vec<f64> = (0..n * classes).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.gen_bool(0.3))).collect();
        let w = compute_class_weights(&labels, classes).unwrap().weights;
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![n, classes], logits.clone()).unwrap());
        let loss = tape.weighted_softmax_cross_entropy(z, &labels, &w).unwrap();
        let got = tape.value(loss).item().unwrap();

        let mut brute = 0.0;
        for j in 0..n {
            let row = &logits[j * classes..(j + 1) * classes];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let p = row[labels[j]].exp() / denom;
            brute += w[labels[j]] * -p.ln();
        }
        brute /= n as f64;
        worst = worst.max((got - brute).abs());
    }
    worst
}

pub fn chi_square_p_value(observed: &[u64], expected: f64) -> f64 {
    let stat: f64 = observed
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

pub fn sample(label: u8, index: u64) -> StoredSample {
    let image: Arc<[f32]> = Arc::from(vec![0.0f32; IMAGE_PIXELS]);
    StoredSample::new(image, label, 0, index)
}

/// Per-class p-values of position-retention uniformity in the dual-stage
/// buffer: a 3:1 class stream of 48 samples into K = 5 per class.
pub fn dual_retention_p_values(trials: u64) -> [f64; 2] {
    let labels: Vec<u8> = (0..48).map(|i| u8::from(i % 4 == 0)).collect();
    let positions: [Vec<usize>; 2] = [0u8, 1].map(|c| (0..48).filter(|&i| labels[i] == c).collect());
    let k = 5;
    let mut counts = [vec![0u64; positions[0].len()], vec![0u64; positions[1].len()]];
    for seed in 0..trials {
        let mut buf = DualStageBuffer::new(k, 2, seed);
        let stream: Vec<StoredSample> = labels.iter().enumerate().map(|(i, &l)| sample(l, i as u64)).collect();
        for chunk in stream.chunks(8) {
            buf.add_batch(chunk);
        }
        for s in buf.stored() {
            let c = s.label as usize;
            let slot = positions[c].iter().position(|&p| p as u64 == s.stream_index).unwrap();
            counts[c][slot] += 1;
        }
    }
    [0, 1].map(|c| {
        let expected = trials as f64 * k as f64 / positions[c].len() as f64;
        chi_square_p_value(&counts[c], expected)
    })
}

/// P-value of position-retention uniformity of the plain reservoir:
/// 40 samples into capacity 10.
pub fn reservoir_retention_p_value(trials: u64) -> f64 {
    let (n, cap) = (40usize, 10usize);
    let mut counts = vec![0u64; n];
    for seed in 0..trials {
        let mut buf = ReservoirBuffer::new(cap, seed);
        let stream: Vec<StoredSample> = (0..n).map(|i| sample((i % 2) as u8, i as u64)).collect();
        buf.add_batch(&stream);
        for s in buf.stored() {
            counts[s.stream_index as usize] += 1;
        }
    }
    chi_square_p_value(&counts, trials as f64 * cap as f64 / n as f64)
}

pub fn arb_stream(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, 0..max_len)
}
