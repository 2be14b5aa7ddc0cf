//! Finite-difference gradient verification.
//!
//! `finite_diff_check` compares the tape's analytic gradient of a scalar
//! function against central differences, coordinate by coordinate. The
//! closure must be deterministic: it is re-evaluated many times, so any
//! weights it uses have to be captured constants, not fresh draws.

use crate::tensor::{Tape, TensorId};

/// Max over coordinates of |analytic - numeric| / max(|numeric|, 1e-8).
///
/// `f` builds the computation from an input leaf; non-scalar outputs are
/// reduced by sum. Panics (naming the coordinate) if the function is not
/// finite at a perturbed point.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape, TensorId) -> TensorId,
    data: &[f64],
    shape: &[usize],
    step: f64,
) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");

    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(data.to_vec(), shape, true);
        let y = reduced(&mut tape, &f, x);
        tape.backward(y);
        tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; data.len()])
    };

    let eval = |perturbed: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(perturbed.to_vec(), shape, false);
        let y = reduced(&mut tape, &f, x);
        tape.value(y)
    };

    let mut worst = 0.0f64;
    let mut probe = data.to_vec();
    for i in 0..data.len() {
        probe[i] = data[i] + step;
        let hi = eval(&probe);
        probe[i] = data[i] - step;
        let lo = eval(&probe);
        probe[i] = data[i];
        assert!(
            hi.is_finite() && lo.is_finite(),
            "function not finite at perturbed coordinate {i}: f(+)={hi}, f(-)={lo}"
        );
        let numeric = (hi - lo) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn reduced(tape: &mut Tape, f: &impl Fn(&mut Tape, TensorId) -> TensorId, x: TensorId) -> TensorId {
    let y = f(tape, x);
    if tape.data(y).len() == 1 {
        y
    } else {
        tape.sum_all(y)
    }
}
