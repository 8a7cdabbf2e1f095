use super::{matmul, Layout, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding for 3x3 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding: output is two pixels smaller per axis.
    Valid,
    /// One pixel of zero padding: output keeps the input size.
    Same,
}

impl Padding {
    pub fn pad(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => 1,
        }
    }

    /// Output extent of a 3x3 convolution over `extent` input pixels.
    pub fn output_extent(self, extent: usize) -> Option<usize> {
        (extent + 2 * self.pad()).checked_sub(2)
    }
}

pub(crate) const KERNEL: usize = 3;
const KERNEL_AREA: usize = KERNEL * KERNEL;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
        /// im2col matrix `[C*9, N*Ho*Wo]`; empty when no gradient is needed.
        cols: Vec<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    WeightedCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations; the computation graph of one step.
///
/// Nodes are appended in execution order, so every input precedes its consumers
/// and a single reverse sweep visits each node exactly once.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, var: Var) -> Result<&Node<T>> {
        self.nodes
            .get(var.0)
            .ok_or_else(|| Error::invariant(format!("variable {} is not on this tape", var.0)))
    }

    /// Records an input. Gradients are accumulated for it iff `requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        tensor.grad = None;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Gradient of the last `backward` root with respect to `var`, if it was a grad leaf.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes.get(var.0).and_then(|n| n.value.grad())
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<T>> {
        self.nodes.get_mut(var.0).and_then(|n| n.value.take_grad())
    }

    /// 3x3 convolution, stride 1. `input: [N,C,H,W]`, `kernel: [F,C,3,3]`, `bias: [F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let x = &self.node(input)?.value;
        let k = &self.node(kernel)?.value;
        let b = &self.node(bias)?.value;
        let (n, c, h, w) = dims4(x.shape(), "conv2d input")?;
        let (f, kc, kh, kw) = dims4(k.shape(), "conv2d kernel")?;
        if kh != KERNEL || kw != KERNEL {
            return Err(Error::invariant(format!(
                "conv2d kernel must be 3x3, got {kh}x{kw}"
            )));
        }
        if kc != c {
            return Err(Error::invariant(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if b.shape() != [f] {
            return Err(Error::invariant(format!(
                "conv2d bias shape {:?}, expected [{f}]",
                b.shape()
            )));
        }
        let (ho, wo) = match (padding.output_extent(h), padding.output_extent(w)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => {
                return Err(Error::invariant(format!(
                    "conv2d input {h}x{w} too small for {padding:?} padding"
                )))
            }
        };
        let plane = ho * wo;
        let rows = c * KERNEL_AREA;
        let cols_n = n * plane;

        let cols = im2col(x.data(), n, c, h, w, ho, wo, padding.pad());
        let mut out_t = vec![T::zero(); f * cols_n];
        matmul(f, rows, cols_n, k.data(), Layout::Normal, &cols, Layout::Normal, &mut out_t, false);

        let mut out = vec![T::zero(); n * f * plane];
        let bias_data = b.data();
        for fi in 0..f {
            let src = &out_t[fi * cols_n..(fi + 1) * cols_n];
            for ni in 0..n {
                let dst = &mut out[(ni * f + fi) * plane..(ni * f + fi + 1) * plane];
                for (d, s) in dst.iter_mut().zip(&src[ni * plane..(ni + 1) * plane]) {
                    *d = *s + bias_data[fi];
                }
            }
        }

        let x_needs = self.nodes[input.0].needs_grad;
        let k_needs = self.nodes[kernel.0].needs_grad;
        let b_needs = self.nodes[bias.0].needs_grad;
        let needs_grad = x_needs || k_needs || b_needs;
        let value = Tensor::new(vec![n, f, ho, wo], out)?;
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
            cols: if needs_grad { cols } else { Vec::new() },
        };
        Ok(self.push(value, op, needs_grad))
    }

    /// Non-overlapping 2x2 max pooling with floor semantics on odd extents.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let (n, c, h, w) = dims4(x.shape(), "maxpool input")?;
        if h < 2 || w < 2 {
            return Err(Error::invariant(format!(
                "maxpool needs at least 2x2 input, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let data = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let top = base + 2 * oy * w + 2 * ox;
                    // row-major window order; strict comparison keeps the first maximum
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let needs_grad = self.nodes[input.0].needs_grad;
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let argmax = if needs_grad { argmax } else { Vec::new() };
        Ok(self.push(value, Op::MaxPool { input, argmax }, needs_grad))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs_grad = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Relu { input }, needs_grad))
    }

    /// Affine map `input[N,D] * weight[D,U] + bias[U]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let wt = &self.node(weight)?.value;
        let b = &self.node(bias)?.value;
        let (n, d) = dims2(x.shape(), "linear input")?;
        let (wd, u) = dims2(wt.shape(), "linear weight")?;
        if wd != d {
            return Err(Error::invariant(format!(
                "linear weight expects {wd} inputs, got {d}"
            )));
        }
        if b.shape() != [u] {
            return Err(Error::invariant(format!(
                "linear bias shape {:?}, expected [{u}]",
                b.shape()
            )));
        }
        let mut out = vec![T::zero(); n * u];
        for row in out.chunks_mut(u) {
            row.copy_from_slice(b.data());
        }
        matmul(n, d, u, x.data(), Layout::Normal, wt.data(), Layout::Normal, &mut out, true);
        let needs_grad = [input, weight, bias]
            .iter()
            .any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(vec![n, u], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, needs_grad))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::invariant("flatten of a scalar"))?;
        let rest = x.numel().checked_div(n).unwrap_or(0);
        let value = x.clone().reshape(vec![n, rest])?;
        let mut value = value;
        value.requires_grad = false;
        value.grad = None;
        let needs_grad = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Reshape { input }, needs_grad))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let total: T = x.data().iter().copied().sum();
        let needs_grad = self.nodes[input.0].needs_grad;
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, needs_grad))
    }

    /// `-(1/N) * sum_j weights[labels[j]] * log softmax(logits[j])[labels[j]]`.
    pub fn weighted_softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[T],
    ) -> Result<Var> {
        let z = &self.node(logits)?.value;
        let (n, c) = dims2(z.shape(), "cross-entropy logits")?;
        if labels.len() != n {
            return Err(Error::invariant(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if weights.len() != c {
            return Err(Error::invariant(format!(
                "{} class weights for {c} classes",
                weights.len()
            )));
        }
        if n == 0 {
            return Err(Error::invariant("cross-entropy over an empty batch"));
        }
        if weights.iter().any(|w| *w < T::zero() || w.is_nan()) {
            return Err(Error::invariant("class weights must be non-negative"));
        }
        if let Some(pos) = z.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite logit at flat index {pos}"
            )));
        }
        for (j, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::invariant(format!(
                    "label {y} at position {j} outside [0, {c})"
                )));
            }
            if !weights[y].is_finite() {
                return Err(Error::invariant(format!(
                    "weight for present class {y} is not finite"
                )));
            }
        }
        let probs = softmax_rows(z.data(), c);
        let mut total = T::zero();
        for (j, &y) in labels.iter().enumerate() {
            let row = &z.data()[j * c..(j + 1) * c];
            let log_p = log_softmax_at(row, y);
            total += weights[y] * log_p;
        }
        let n_t = T::from_usize(n).expect("batch size fits");
        let loss = -total / n_t;
        let needs_grad = self.nodes[logits.0].needs_grad;
        let op = Op::WeightedCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, needs_grad))
    }

    /// Reverse sweep from a scalar `root`; leaf gradients land in their tensors.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(Error::invariant(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(upstream);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    padding,
                    cols,
                } => {
                    let x_shape = self.nodes[input.0].value.shape();
                    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
                    let out_shape = node.value.shape();
                    let (f, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
                    let plane = ho * wo;
                    let rows = c * KERNEL_AREA;
                    let cols_n = n * plane;

                    // [N,F,P] -> [F, N*P]
                    let mut dout_t = vec![T::zero(); f * cols_n];
                    for ni in 0..n {
                        for fi in 0..f {
                            let src = &upstream[(ni * f + fi) * plane..(ni * f + fi + 1) * plane];
                            dout_t[fi * cols_n + ni * plane..fi * cols_n + (ni + 1) * plane]
                                .copy_from_slice(src);
                        }
                    }
                    if self.nodes[bias.0].needs_grad {
                        let db: Vec<T> = dout_t
                            .chunks(cols_n)
                            .map(|row| row.iter().copied().sum())
                            .collect();
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.nodes[kernel.0].needs_grad {
                        let mut dk = vec![T::zero(); f * rows];
                        matmul(f, cols_n, rows, &dout_t, Layout::Normal, cols, Layout::Transposed, &mut dk, false);
                        accumulate(&mut grads, *kernel, dk);
                    }
                    if self.nodes[input.0].needs_grad {
                        let kdata = self.nodes[kernel.0].value.data();
                        let mut dcols = vec![T::zero(); rows * cols_n];
                        matmul(rows, f, cols_n, kdata, Layout::Transposed, &dout_t, Layout::Normal, &mut dcols, false);
                        let dx = col2im(&dcols, n, c, h, w, ho, wo, padding.pad());
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); self.nodes[input.0].value.numel()];
                    for (g, &src) in upstream.iter().zip(argmax) {
                        dx[src as usize] += *g;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Relu { input } => {
                    let dx: Vec<T> = node
                        .value
                        .data()
                        .iter()
                        .zip(&upstream)
                        .map(|(&out, &g)| if out > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.0].value;
                    let wt = &self.nodes[weight.0].value;
                    let (n, d) = (x.shape()[0], x.shape()[1]);
                    let u = wt.shape()[1];
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![T::zero(); u];
                        for row in upstream.chunks(u) {
                            for (acc, g) in db.iter_mut().zip(row) {
                                *acc += *g;
                            }
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.nodes[weight.0].needs_grad {
                        let mut dw = vec![T::zero(); d * u];
                        matmul(d, n, u, x.data(), Layout::Transposed, &upstream, Layout::Normal, &mut dw, false);
                        accumulate(&mut grads, *weight, dw);
                    }
                    if self.nodes[input.0].needs_grad {
                        let mut dx = vec![T::zero(); n * d];
                        matmul(n, u, d, &upstream, Layout::Normal, wt.data(), Layout::Transposed, &mut dx, false);
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Reshape { input } => {
                    accumulate(&mut grads, *input, upstream);
                }
                Op::Sum { input } => {
                    let g = upstream[0];
                    let dx = vec![g; self.nodes[input.0].value.numel()];
                    accumulate(&mut grads, *input, dx);
                }
                Op::WeightedCrossEntropy {
                    logits,
                    probs,
                    labels,
                    weights,
                } => {
                    let c = weights.len();
                    let n = labels.len();
                    let scale = upstream[0] / T::from_usize(n).expect("batch size fits");
                    let mut dz = probs.clone();
                    for (j, &y) in labels.iter().enumerate() {
                        let wj = weights[y] * scale;
                        let row = &mut dz[j * c..(j + 1) * c];
                        row[y] -= T::one();
                        row.iter_mut().for_each(|v| *v *= wj);
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grad.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, delta: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(Error::invariant(format!(
            "{what} must be rank 4, got shape {shape:?}"
        ))),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::invariant(format!(
            "{what} must be rank 2, got shape {shape:?}"
        ))),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

fn log_softmax_at<T: Real>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse: T = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row[target] - max - lse
}

/// `[N,C,H,W] -> [C*9, N*Ho*Wo]`, zero outside the image.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    pad: usize,
) -> Vec<T> {
    let plane = ho * wo;
    let cols_n = n * plane;
    let mut cols = vec![T::zero(); c * KERNEL_AREA * cols_n];
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL_AREA + ky * KERNEL + kx) * cols_n;
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let dst = &mut cols[row + ni * plane..row + (ni + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        let srow = &src[iy * w..(iy + 1) * w];
                        // ix = ox + kx - pad
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - pad;
                        drow[ox_lo..ox_hi].copy_from_slice(&srow[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    pad: usize,
) -> Vec<T> {
    let plane = ho * wo;
    let cols_n = n * plane;
    let mut x = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL_AREA + ky * KERNEL + kx) * cols_n;
                for ni in 0..n {
                    let src = &cols[row + ni * plane..row + (ni + 1) * plane];
                    let dst = &mut x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - pad;
                        let srow = &src[oy * wo + ox_lo..oy * wo + ox_hi];
                        let drow = &mut dst[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}
