//! Central finite-difference gradient checking.
//!
//! Everything here evaluates the function forward only; it never looks at
//! the tape's backward rules, so it can serve as an oracle for them.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that gradients which are
/// zero up to round-off do not blow the ratio up.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    /// Entries left out because the difference interval was not smooth.
    pub skipped: usize,
}

impl GradCheck {
    pub fn record(&mut self, input: usize, element: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((input, element));
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for element `index` of
/// input `which`.
pub fn central_difference(
    inputs: &[Tensor],
    which: usize,
    index: usize,
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    let mut probe = inputs.to_vec();
    let base = inputs[which].data()[index];
    probe[which].data_mut()[index] = base + eps;
    let plus = f(&probe);
    probe[which].data_mut()[index] = base - eps;
    let minus = f(&probe);
    (plus - minus) / (2.0 * eps)
}

/// Compare tape gradients of the scalar built by `build` against central
/// differences for every element of every input.
pub fn check_tape_gradients(
    inputs: &[Tensor],
    eps: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> GradCheck {
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_tape_gradients_at(inputs, &all, eps, build)
}

/// Like [`check_tape_gradients`], restricted to the listed element indices
/// of each input.
pub fn check_tape_gradients_at(
    inputs: &[Tensor],
    indices: &[Vec<usize>],
    eps: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> GradCheck {
    check_tape_gradients_where(inputs, indices, eps, build, |_, _| true)
}

/// Like [`check_tape_gradients_at`], but an entry is only compared when
/// `smooth(plus, minus)` accepts the two perturbed input sets. Piecewise
/// linear functions use this to skip intervals that straddle a kink, where
/// a central difference is not an estimate of the derivative.
pub fn check_tape_gradients_where(
    inputs: &[Tensor],
    indices: &[Vec<usize>],
    eps: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    smooth: impl Fn(&[Tensor], &[Tensor]) -> bool,
) -> GradCheck {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().expect("scalar output")
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");

    let mut report = GradCheck::default();
    for (which, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(inputs[which].shape());
                &zeros
            }
        };
        for &index in &indices[which] {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which].data_mut()[index] += eps;
            minus[which].data_mut()[index] -= eps;
            if !smooth(&plus, &minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = central_difference(inputs, which, index, eps, eval);
            report.record(which, index, analytic.data()[index], numeric);
        }
    }
    report
}

/// Up to `max` evenly spread element indices of a tensor with `numel`
/// elements, always including the first and last.
pub fn spread_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|i| i * (numel - 1) / (max - 1)).collect();
    idx.dedup();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let x = vec![Tensor::scalar(2.0)];
        let d = central_difference(&x, 0, 0, 1e-4, |t| t[0].data()[0].powi(3));
        assert!((d - 12.0).abs() < 1e-7);
    }

    #[test]
    fn spread_indices_covers_ends() {
        let idx = spread_indices(1000, 10);
        assert_eq!(idx.first(), Some(&0));
        assert_eq!(idx.last(), Some(&999));
        assert_eq!(idx.len(), 10);
        assert_eq!(spread_indices(5, 10), vec![0, 1, 2, 3, 4]);
    }
}
