//! The two classifier architectures, their cost counters and checkpoint I/O.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{softmax_rows, Padding, Real, Tape, Tensor, Var};

/// Side length of the square single-channel input images.
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 2;

/// Parameter count reported for PneumoNet alongside the baseline's 420,610.
/// The layer shapes give 30,498; the gap is surfaced as a warning.
pub const PNEUMONET_REFERENCE_PARAMETERS: usize = 56_194;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Pneumonet,
    BaselineCnn,
}

impl Architecture {
    fn id(self) -> u8 {
        match self {
            Architecture::Pneumonet => 1,
            Architecture::BaselineCnn => 2,
        }
    }

    fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Architecture::Pneumonet),
            2 => Some(Architecture::BaselineCnn),
            _ => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Pneumonet => "pneumonet",
            Architecture::BaselineCnn => "baseline_cnn",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pneumonet" => Ok(Architecture::Pneumonet),
            "baseline_cnn" => Ok(Architecture::BaselineCnn),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected pneumonet or baseline_cnn)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        padding: Padding,
    },
    Relu,
    MaxPool,
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

/// Layer list of one of the supported architectures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    architecture: Architecture,
    layers: Vec<Layer>,
    num_classes: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        match architecture {
            Architecture::Pneumonet => Self::pneumonet(),
            Architecture::BaselineCnn => Self::baseline_cnn(),
        }
    }

    /// conv(1->16, valid) relu pool conv(16->32, valid) relu pool flatten(800) fc(32) relu fc(2)
    pub fn pneumonet() -> Self {
        Self::two_block(Architecture::Pneumonet, 16, 32, Padding::Valid, 800, 32)
    }

    /// conv(1->32, same) relu pool conv(32->64, same) relu pool flatten(3136) fc(128) relu fc(2)
    pub fn baseline_cnn() -> Self {
        Self::two_block(Architecture::BaselineCnn, 32, 64, Padding::Same, 3136, 128)
    }

    fn two_block(
        architecture: Architecture,
        c1: usize,
        c2: usize,
        padding: Padding,
        flat: usize,
        hidden: usize,
    ) -> Self {
        use Layer::*;
        ModelSpec {
            architecture,
            layers: vec![
                Conv {
                    in_channels: 1,
                    out_channels: c1,
                    padding,
                },
                Relu,
                MaxPool,
                Conv {
                    in_channels: c1,
                    out_channels: c2,
                    padding,
                },
                Relu,
                MaxPool,
                Flatten,
                Linear {
                    inputs: flat,
                    outputs: hidden,
                },
                Relu,
                Linear {
                    inputs: hidden,
                    outputs: NUM_CLASSES,
                },
            ],
            num_classes: NUM_CLASSES,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Names and shapes of all trainable tensors, in forward order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let (mut conv, mut fc) = (0, 0);
        for layer in &self.layers {
            match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    conv += 1;
                    out.push((format!("conv{conv}.weight"), vec![out_channels, in_channels, 3, 3]));
                    out.push((format!("conv{conv}.bias"), vec![out_channels]));
                }
                Layer::Linear { inputs, outputs } => {
                    fc += 1;
                    out.push((format!("fc{fc}.weight"), vec![inputs, outputs]));
                    out.push((format!("fc{fc}.bias"), vec![outputs]));
                }
                _ => {}
            }
        }
        out
    }

    /// Per-image activation shape after each layer, starting with the input.
    pub fn activation_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = vec![1, IMAGE_SIDE, IMAGE_SIDE];
        let mut out = vec![shape.clone()];
        for layer in &self.layers {
            shape = match *layer {
                Layer::Conv {
                    out_channels,
                    padding,
                    ..
                } => vec![
                    out_channels,
                    padding.output_extent(shape[1]).unwrap_or(0),
                    padding.output_extent(shape[2]).unwrap_or(0),
                ],
                Layer::Relu => shape,
                Layer::MaxPool => vec![shape[0], shape[1] / 2, shape[2] / 2],
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Linear { outputs, .. } => vec![outputs],
            };
            out.push(shape.clone());
        }
        out
    }

    /// Width of the vector produced by the flatten layer.
    pub fn flatten_width(&self) -> usize {
        let shapes = self.activation_shapes();
        self.layers
            .iter()
            .position(|l| *l == Layer::Flatten)
            .map(|i| shapes[i + 1][0])
            .unwrap_or(0)
    }

    pub fn count_parameters(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Forward FLOPs for one image; a multiply-accumulate counts as 2, and
    /// pooling, ReLU and softmax count as 0.
    pub fn count_flops(&self) -> u64 {
        let shapes = self.activation_shapes();
        self.layers
            .iter()
            .zip(shapes.iter().skip(1))
            .map(|(layer, out)| match *layer {
                Layer::Conv { in_channels, .. } => {
                    2 * (out[0] * out[1] * out[2] * in_channels * 9) as u64
                }
                Layer::Linear { inputs, outputs } => 2 * (inputs * outputs) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Parameter bytes plus the largest single activation at batch size 1 (f32).
    pub fn memory_bytes(&self) -> u64 {
        let largest = self
            .activation_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .max()
            .unwrap_or(0);
        4 * (self.count_parameters() + largest) as u64
    }

    /// Notes where this architecture departs from externally reported figures.
    pub fn warnings(&self) -> Vec<String> {
        match self.architecture {
            Architecture::Pneumonet => {
                let count = self.count_parameters();
                if count == PNEUMONET_REFERENCE_PARAMETERS {
                    Vec::new()
                } else {
                    vec![format!(
                        "pneumonet layer shapes give {count} parameters; the reference count is {PNEUMONET_REFERENCE_PARAMETERS}"
                    )]
                }
            }
            Architecture::BaselineCnn => Vec::new(),
        }
    }
}

/// Runs `spec` on an already recorded `[N,1,28,28]` input and returns `[N,2]` logits.
pub fn forward_on_tape<T: Real>(
    spec: &ModelSpec,
    tape: &mut Tape<T>,
    params: &[Var],
    input: Var,
) -> Result<Var> {
    let shape = tape.value(input).shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != IMAGE_SIDE || shape[3] != IMAGE_SIDE {
        return Err(Error::invariant(format!(
            "model input must be [N,1,{IMAGE_SIDE},{IMAGE_SIDE}], got {shape:?}"
        )));
    }
    let expected = spec.parameter_shapes().len();
    if params.len() != expected {
        return Err(Error::invariant(format!(
            "{} parameter tensors supplied, architecture needs {expected}",
            params.len()
        )));
    }
    let mut x = input;
    let mut next = params.iter().copied();
    let mut take = || next.next().expect("parameter count checked");
    for layer in &spec.layers {
        x = match *layer {
            Layer::Conv { padding, .. } => {
                let (k, b) = (take(), take());
                tape.conv2d(x, k, b, padding)?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::MaxPool => tape.maxpool2x2(x)?,
            Layer::Flatten => tape.flatten(x)?,
            Layer::Linear { .. } => {
                let (w, b) = (take(), take());
                tape.linear(x, w, b)?
            }
        };
    }
    Ok(x)
}

/// Argmax labels (ties go to class 0) and softmax probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    /// Row-major `[N, 2]`.
    pub probabilities: Vec<f32>,
}

impl Prediction {
    pub fn from_logits(logits: &[f32], classes: usize) -> Self {
        let labels = logits
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate().skip(1) {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        Prediction {
            labels,
            probabilities: softmax_rows(logits, classes),
        }
    }
}

/// A parameterized classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    seed: u64,
}

impl Model {
    /// Kaiming-uniform fan-in weights, zero biases, drawn from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in spec.parameter_shapes() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            } else {
                vec![0.0; numel]
            };
            names.push(name);
            params.push(Tensor::new(shape, data).expect("shape from spec"));
        }
        Model {
            spec,
            names,
            params,
            seed,
        }
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        let (names, params) = spec
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .unzip();
        Model {
            spec,
            names,
            params,
            seed: 0,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn count_flops(&self) -> u64 {
        self.spec.count_flops()
    }

    /// Records the parameters on `tape`, as grad leaves when `trainable`.
    pub fn record_parameters<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = p.cast::<T>();
                tape.leaf(if trainable { t.requiring_grad() } else { t })
            })
            .collect()
    }

    /// Logits `[N,2]` for `images: [N,1,28,28]`.
    pub fn forward(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let params = self.record_parameters(&mut tape, false);
        let x = tape.leaf(images.clone());
        let out = forward_on_tape(&self.spec, &mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Prediction> {
        let logits = self.forward(images)?;
        Ok(Prediction::from_logits(logits.data(), self.spec.num_classes))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    /// Writes the checkpoint atomically and returns its size in bytes.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.checkpoint_bytes();
        write_atomic(path.as_ref(), &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Binary checkpoint layout (all integers little-endian):
///
/// ```text
/// magic    b"PNCK"
/// version  u16 (= 1)
/// arch     u8  (1 = pneumonet, 2 = baseline_cnn)
/// reserved u8  (= 0)
/// seed     u64
/// count    u32 number of parameter blocks
/// block*   name_len u16, name utf-8, rank u8, dims u32 * rank, data f32 * prod(dims)
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"PNCK";
    pub const VERSION: u16 = 1;

    pub(super) fn encode(model: &Model) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * model.count_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(model.spec.architecture().id());
        out.push(0);
        out.extend_from_slice(&model.seed.to_le_bytes());
        out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
        for (name, param) in model.names.iter().zip(&model.params) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(param.shape().len() as u8);
            for d in param.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in param.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
            let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
            match end {
                Some(end) => {
                    let s = &self.bytes[self.pos..end];
                    self.pos = end;
                    Ok(s)
                }
                None => Err(Error::format(
                    field,
                    self.pos as u64,
                    format!(
                        "truncated: need {n} bytes, {} remain",
                        self.bytes.len() - self.pos
                    ),
                )),
            }
        }

        fn u8(&mut self, field: &str) -> Result<u8> {
            Ok(self.take(1, field)?[0])
        }

        fn u16(&mut self, field: &str) -> Result<u16> {
            Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
        }

        fn u32(&mut self, field: &str) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
        }

        fn u64(&mut self, field: &str) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
        }
    }

    pub(super) fn decode(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("magic", 0, "not a checkpoint file"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::format("version", 4, format!("unsupported version {version}")));
        }
        let arch_id = r.u8("architecture")?;
        let architecture = Architecture::from_id(arch_id).ok_or_else(|| {
            Error::format("architecture", 6, format!("unknown architecture id {arch_id}"))
        })?;
        r.u8("reserved")?;
        let seed = r.u64("seed")?;
        let spec = ModelSpec::new(architecture);
        let expected = spec.parameter_shapes();
        let count_at = r.pos as u64;
        let count = r.u32("parameter count")? as usize;
        if count != expected.len() {
            return Err(Error::format(
                "parameter count",
                count_at,
                format!("{count} blocks, {architecture} has {}", expected.len()),
            ));
        }
        let mut names = Vec::with_capacity(count);
        let mut params = Vec::with_capacity(count);
        for (want_name, want_shape) in expected {
            let at = r.pos as u64;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format("name", at, "name is not utf-8"))?
                .to_string();
            if name != want_name {
                return Err(Error::format(
                    "name",
                    at,
                    format!("expected block `{want_name}`, found `{name}`"),
                ));
            }
            let rank_at = r.pos as u64;
            let rank = r.u8(&format!("{name}.rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("{name}.dims"))? as usize);
            }
            if shape != want_shape {
                return Err(Error::format(
                    format!("{name}.dims"),
                    rank_at,
                    format!("shape {shape:?}, expected {want_shape:?}"),
                ));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, &format!("{name}.data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "trailer",
                r.pos as u64,
                format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Model {
            spec,
            names,
            params,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, value: f32) -> Tensor<f32> {
        Tensor::full(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], value)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::baseline_cnn().count_parameters(), 420_610);
        assert_eq!(ModelSpec::pneumonet().count_parameters(), 30_498);
        let model = Model::build(ModelSpec::pneumonet(), 3);
        assert_eq!(model.count_parameters(), 160 + 4_640 + 25_632 + 66);
    }

    #[test]
    fn linear_800_to_32_counts() {
        let spec = ModelSpec::pneumonet();
        let fc1 = spec
            .parameter_shapes()
            .into_iter()
            .filter(|(n, _)| n.starts_with("fc1"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum::<usize>();
        assert_eq!(fc1, 25_632);
    }

    #[test]
    fn activation_pipeline() {
        let shapes = ModelSpec::pneumonet().activation_shapes();
        let spatial: Vec<usize> = shapes.iter().filter(|s| s.len() == 3).map(|s| s[1]).collect();
        assert_eq!(spatial, vec![28, 26, 26, 13, 11, 11, 5]);
        assert_eq!(ModelSpec::pneumonet().flatten_width(), 800);
        assert_eq!(ModelSpec::baseline_cnn().flatten_width(), 3_136);
    }

    #[test]
    fn flop_counts() {
        let spec = ModelSpec::pneumonet();
        assert_eq!(spec.count_flops(), 194_688 + 1_115_136 + 51_200 + 128);
        assert!(ModelSpec::baseline_cnn().count_flops() > spec.count_flops());
    }

    #[test]
    fn warning_only_for_pneumonet() {
        assert_eq!(ModelSpec::pneumonet().warnings().len(), 1);
        assert!(ModelSpec::baseline_cnn().warnings().is_empty());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let model = Model::zeros(ModelSpec::pneumonet());
        let out = model.forward(&batch(3, 0.0)).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_spatial_size() {
        let model = Model::zeros(ModelSpec::pneumonet());
        let bad = Tensor::zeros(vec![1, 1, 27, 28]);
        assert!(matches!(model.forward(&bad), Err(Error::Invariant(_))));
    }

    #[test]
    fn predict_tie_goes_to_class_zero() {
        let p = Prediction::from_logits(&[2.0, -1.0, 0.0, 0.0, -3.0, 1.0], 2);
        assert_eq!(p.labels, vec![0, 0, 1]);
        assert_eq!(&p.probabilities[2..4], &[0.5, 0.5]);
        for row in p.probabilities.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(ModelSpec::baseline_cnn(), 11);
        let b = Model::build(ModelSpec::baseline_cnn(), 11);
        assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
        let c = Model::build(ModelSpec::baseline_cnn(), 12);
        assert_ne!(a.checkpoint_bytes(), c.checkpoint_bytes());
    }

    #[test]
    fn checkpoint_round_trip_and_size() {
        let model = Model::build(ModelSpec::pneumonet(), 5);
        let bytes = model.checkpoint_bytes();
        let overhead = bytes.len() - 4 * model.count_parameters();
        assert!(overhead < 1024, "overhead {overhead}");
        let back = Model::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        let x = batch(2, 0.3);
        let a = model.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn truncated_or_corrupt_checkpoint_names_field() {
        let bytes = Model::build(ModelSpec::pneumonet(), 5).checkpoint_bytes();
        match Model::from_checkpoint_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "fc2.bias.data"),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match Model::from_checkpoint_bytes(&bad) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes;
        bad[6] = 9;
        assert!(matches!(
            Model::from_checkpoint_bytes(&bad),
            Err(Error::Format { .. })
        ));
    }
}
