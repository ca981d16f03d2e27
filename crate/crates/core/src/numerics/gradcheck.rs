//! Central finite-difference verification of registered backward passes.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms, so components that vanish analytically do not divide by zero.
const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<40} max rel err {:.3e}",
            if self.passed { "ok" } else { "FAIL" },
            self.op,
            self.max_rel_error
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the analytic gradient of `sum(op(inputs) * R)` for a fixed random
/// `R` against central differences, element by element over every input.
///
/// `op` rebuilds the computation on a fresh tape from leaf variables; it is
/// evaluated `2 * total_input_len + 1` times.
pub fn grad_check<F>(name: &str, inputs: &[Tensor], eps: f64, op: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(name, inputs, eps, usize::MAX, op)
}

/// Like [`grad_check`] but perturbs at most `per_input` coordinates of each
/// input, chosen by a fixed-seed shuffle. For networks whose full check
/// would need too many forward passes.
pub fn grad_check_sampled<F>(name: &str, inputs: &[Tensor], eps: f64, per_input: usize, op: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let fail = |name: &str| GradCheckReport {
        op: name.to_string(),
        max_rel_error: f64::INFINITY,
        passed: false,
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let Ok(out) = op(&mut tape, &vars) else {
        return fail(name);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let projection = Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let Ok(loss) = tape.dot_const(out, &projection) else {
        return fail(name);
    };
    if !tape.value(loss).all_finite() {
        return fail(name);
    }
    let Ok(grads) = tape.backward(loss) else {
        return fail(name);
    };

    let eval = |perturbed: &[Tensor]| -> Option<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let o = op(&mut t, &vs).ok()?;
        let l = t.dot_const(o, &projection).ok()?;
        let v = t.value(l).data()[0];
        v.is_finite().then_some(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        let mut coords: Vec<usize> = (0..input.len()).collect();
        if per_input < coords.len() {
            coords.shuffle(&mut rng);
            coords.truncate(per_input);
        }
        for j in coords {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = x0 - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = x0;
            let (Some(p), Some(m)) = (plus, minus) else {
                return fail(name);
            };
            let numeric = (p - m) / (2.0 * eps);
            let a = analytic.data()[j];
            if !a.is_finite() {
                return fail(name);
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }
    GradCheckReport {
        op: name.to_string(),
        max_rel_error: worst,
        passed: worst < PASS_THRESHOLD,
    }
}
