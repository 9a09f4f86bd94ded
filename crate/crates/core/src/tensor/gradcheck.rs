//! Central finite-difference verification of tape gradients (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step of the fourth-order five-point stencil.
pub const STEP: f64 = 1e-3;

/// Magnitude below which an analytic and a numeric gradient both count as zero.
pub const ZERO_LEVEL: f64 = 1e-9;

/// Outcome of a gradient check over one or more inputs.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / (|numeric| + 1e-8)` over all checked elements.
    pub max_rel_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Elements where both gradients were below [`ZERO_LEVEL`].
    pub zeros: usize,
}

fn objective<F>(op: &F, inputs: &[Tensor<f64>], probe: &mut Option<Vec<f64>>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let value = tape.value(out).data();
    let weights = probe.get_or_insert_with(|| probe_weights(value.len(), seed));
    let total: f64 = value.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
    Ok(total)
}

fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Checks the gradient of `op` with respect to every element of every input.
///
/// Non-scalar outputs are reduced with a fixed random probe vector derived
/// from `seed`, so the whole Jacobian takes part in the comparison.
pub fn check_gradients_multi<F>(op: F, inputs: &[Tensor<f64>], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_where(op, inputs, seed, |_, _| true)
}

/// Like [`check_gradients_multi`], restricted to the `(input, element)`
/// pairs accepted by `include`. Elements whose true gradient is identically
/// zero have no meaningful relative error and can be skipped this way.
pub fn check_gradients_where<F, P>(op: F, inputs: &[Tensor<f64>], seed: u64, include: P) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    P: Fn(usize, usize) -> bool,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let weights = probe_weights(tape.value(out).len(), seed);
    let loss = if tape.value(out).len() == 1 { out } else { tape.weighted_sum(out, weights.clone())? };
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut probe = Some(weights);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0, zeros: 0 };
    for (k, input) in inputs.iter().enumerate() {
        for e in (0..input.len()).filter(|&e| include(k, e)) {
            let orig = input.data()[e];
            let mut at = |offset: f64| {
                work[k].data_mut()[e] = orig + offset;
                objective(&op, &work, &mut probe, seed)
            };
            let (p1, m1, p2, m2) = (at(STEP)?, at(-STEP)?, at(2.0 * STEP)?, at(-2.0 * STEP)?);
            work[k].data_mut()[e] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
            let a = analytic[k][e];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {k} element {e}: analytic {a}, numeric {numeric}"
                )));
            }
            // both sides at round-off level: a true zero, no relative error
            let rel = if a.abs() < ZERO_LEVEL && numeric.abs() < ZERO_LEVEL {
                report.zeros += 1;
                0.0
            } else {
                (a - numeric).abs() / (numeric.abs() + 1e-8)
            };
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form: returns the maximum relative error.
pub fn check_gradients<F>(op: F, input: &Tensor<f64>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = check_gradients_multi(|tape, vars| op(tape, vars[0]), std::slice::from_ref(input), seed)?;
    Ok(report.max_rel_error)
}

/// Uniform `[-1, 1]` tensor for gradient checks.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_exact() {
        let w = random_tensor(&[3, 4], 1);
        let b = random_tensor(&[4], 2);
        let x = random_tensor(&[5, 3], 3);
        let err = check_gradients(
            |tape, x| {
                let w = tape.constant(w.clone());
                let b = tape.constant(b.clone());
                tape.linear(x, w, b)
            },
            &x,
            7,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let res = check_gradients(|tape, x| Ok(tape.scale(x, f64::NAN)), &x, 1);
        assert!(res.is_err());
    }
}
