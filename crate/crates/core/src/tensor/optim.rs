use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected adam or sgd)"
            ))),
        }
    }
}

/// Per-run optimizer state. Moment buffers exist only for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f32,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step_count: u64,
}

impl OptimizerState {
    pub const BETA1: f32 = 0.9;
    pub const BETA2: f32 = 0.999;
    pub const EPSILON: f32 = 1e-8;

    pub fn new(kind: OptimizerKind, learning_rate: f32, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        OptimizerState {
            kind,
            learning_rate,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            epsilon: Self::EPSILON,
            m,
            v,
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Clears moments and the step counter.
    pub fn reset(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(0.0));
        self.step_count = 0;
    }

    /// Dispatches to [`adam_step`] or [`sgd_step`].
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>]) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam => adam_step(params, grads, self),
            OptimizerKind::Sgd => sgd_step(params, grads, self),
        }
    }
}

fn check_grads(params: &[Tensor<f32>], grads: &[Vec<f32>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invariant(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::invariant(format!(
                "parameter {i}: gradient has {} elements, expected {}",
                g.len(),
                p.numel()
            )));
        }
    }
    Ok(())
}

/// Adam with bias correction.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
) -> Result<()> {
    if state.kind != OptimizerKind::Adam {
        return Err(Error::invariant("adam_step on a non-Adam optimizer state"));
    }
    check_grads(params, grads)?;
    if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return Err(Error::invariant("Adam moment buffers do not match parameter shapes"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent: `w <- w - lr * g`.
pub fn sgd_step(
    params: &mut [Tensor<f32>],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
) -> Result<()> {
    if state.kind != OptimizerKind::Sgd {
        return Err(Error::invariant("sgd_step on a non-SGD optimizer state"));
    }
    check_grads(params, grads)?;
    state.step_count += 1;
    let lr = state.learning_rate;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &g) in p.data_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32) -> Vec<Tensor<f32>> {
        vec![Tensor::new(vec![1], vec![w]).unwrap()]
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = scalar_param(0.75);
        let mut state = OptimizerState::new(OptimizerKind::Adam, 0.001, &params);
        adam_step(&mut params, &[vec![0.0]], &mut state).unwrap();
        assert_eq!(params[0].data(), &[0.75]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
        let mut params = scalar_param(0.0);
        let mut state = OptimizerState::new(OptimizerKind::Adam, 0.001, &params);
        adam_step(&mut params, &[vec![1.0]], &mut state).unwrap();
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn adam_converges_on_square() {
        let mut params = scalar_param(1.0);
        let mut state = OptimizerState::new(OptimizerKind::Adam, 0.1, &params);
        for _ in 0..100 {
            let g = 2.0 * params[0].data()[0];
            adam_step(&mut params, &[vec![g]], &mut state).unwrap();
        }
        assert!(params[0].data()[0].abs() < 0.1, "w = {}", params[0].data()[0]);
    }

    #[test]
    fn sgd_examples() {
        let mut params = scalar_param(2.0);
        let mut state = OptimizerState::new(OptimizerKind::Sgd, 0.5, &params);
        sgd_step(&mut params, &[vec![1.0]], &mut state).unwrap();
        assert_eq!(params[0].data(), &[1.5]);
        sgd_step(&mut params, &[vec![0.0]], &mut state).unwrap();
        assert_eq!(params[0].data(), &[1.5]);
    }

    #[test]
    fn sgd_geometric_decay() {
        // w_{t+1} = (1 - 2 lr) w_t = 0.8^t
        let mut params = scalar_param(1.0);
        let mut state = OptimizerState::new(OptimizerKind::Sgd, 0.1, &params);
        for _ in 0..200 {
            let g = 2.0 * params[0].data()[0];
            sgd_step(&mut params, &[vec![g]], &mut state).unwrap();
        }
        assert!(params[0].data()[0].abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_and_wrong_kind_are_rejected() {
        let mut params = scalar_param(1.0);
        let mut adam = OptimizerState::new(OptimizerKind::Adam, 0.1, &params);
        assert!(adam_step(&mut params, &[vec![1.0, 2.0]], &mut adam).is_err());
        assert!(sgd_step(&mut params, &[vec![1.0]], &mut adam).is_err());
        let mut sgd = OptimizerState::new(OptimizerKind::Sgd, 0.1, &params);
        assert!(adam_step(&mut params, &[vec![1.0]], &mut sgd).is_err());
    }

    #[test]
    fn moments_exist_only_for_adam() {
        let params = vec![Tensor::<f32>::zeros(vec![3, 2]), Tensor::zeros(vec![4])];
        let adam = OptimizerState::new(OptimizerKind::Adam, 0.1, &params);
        assert_eq!(adam.m.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 4]);
        let sgd = OptimizerState::new(OptimizerKind::Sgd, 0.1, &params);
        assert!(sgd.m.is_empty() && sgd.v.is_empty());
    }

    #[test]
    fn steps_are_bit_deterministic() {
        let run = || {
            let mut params = vec![Tensor::new(vec![3], vec![0.3f32, -1.2, 2.5]).unwrap()];
            let mut state = OptimizerState::new(OptimizerKind::Adam, 0.01, &params);
            for i in 0..20 {
                let g: Vec<f32> = params[0].data().iter().map(|w| w * 1.7 + i as f32 * 0.01).collect();
                state.step(&mut params, &[g]).unwrap();
            }
            params[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
