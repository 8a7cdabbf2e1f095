use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1, |a|, |n|)` over all checked coordinates.
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of the scalar function `f` against central differences.
///
/// `f` receives a fresh tape with `inputs` already recorded as grad leaves, in order.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coordinates(f, inputs, eps, &all)
}

/// [`grad_check`] restricted to at most `per_input` coordinates of each input,
/// drawn without replacement from `seed`.
pub fn grad_check_sampled<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            let mut idx = index::sample(&mut rng, n, per_input.min(n)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_coordinates(f, inputs, eps, &chosen)
}

fn check_coordinates<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::invariant(format!(
            "grad_check eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    let evaluate = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().requiring_grad()))
            .collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?.to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("grad_check objective is {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().requiring_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .map(|g| g.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
                .unwrap_or_default()
        })
        .collect();

    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    let step = T::from_f64_lossy(eps);
    for (which, grads) in analytic.iter().enumerate() {
        if grads.is_empty() {
            continue;
        }
        for &coord in &coords[which] {
            let a = grads[coord];
            let original = probe[which].data()[coord];
            probe[which].data_mut()[coord] = original + step;
            let plus = evaluate(&probe)?;
            probe[which].data_mut()[coord] = original - step;
            let minus = evaluate(&probe)?;
            probe[which].data_mut()[coord] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            if !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "analytic gradient of input {which} at {coord} is {a}"
                )));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates,
    })
}
