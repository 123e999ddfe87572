//! Central finite-difference probes used to verify analytic gradients.

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

/// Default probe step for central differences.
pub const DEFAULT_STEP: Real = 1e-3;

/// Central-difference gradient of a scalar function evaluated at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[Real], step: Real) -> Vec<Real>
where
    F: FnMut(&[Real]) -> Real,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let saved = probe[i];
        probe[i] = saved + step;
        let hi = f(&probe);
        probe[i] = saved - step;
        let lo = f(&probe);
        probe[i] = saved;
        *g = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Central differences restricted to the given element indices.
pub fn numeric_gradient_at<F>(mut f: F, x: &[Real], indices: &[usize], step: Real) -> Vec<Real>
where
    F: FnMut(&[Real]) -> Real,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(indices.len());
    for &i in indices {
        let saved = probe[i];
        probe[i] = saved + step;
        let hi = f(&probe);
        probe[i] = saved - step;
        let lo = f(&probe);
        probe[i] = saved;
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// Relative error between two gradients: `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`.
/// When both norms sit below 1e-8 the gradients are numerically zero and
/// the absolute difference is returned instead, so exactly-dead parameters
/// compare as equal rather than as noise over noise.
pub fn relative_error(a: &[Real], b: &[Real]) -> Real {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&p, &q) in a.iter().zip(b) {
        diff += (p - q) * (p - q);
        na += p * p;
        nb += q * q;
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom < 1e-8 {
        return diff.sqrt();
    }
    diff.sqrt() / denom
}

/// Relative error between a graph's analytic input gradient and central
/// finite differences. `build` must construct the same scalar loss on any
/// tape it is given; it runs once for the analytic sweep and twice per
/// element for the probes.
pub fn input_grad_error<F>(x0: &Tensor, step: Real, build: F) -> Result<Real>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let loss = build(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x0.len()]);
    let numeric = numeric_gradient(
        |vals| {
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::new(x0.shape().to_vec(), vals.to_vec()).expect("probe shape fixed"),
                true,
            );
            let loss = build(&mut tape, x).expect("loss built once already");
            tape.value(loss).item()
        },
        x0.data(),
        step,
    );
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let grad = numeric_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0, 3.0], 1e-3);
        let expected = [2.0, -4.0, 6.0];
        assert!(relative_error(&grad, &expected) < 1e-6);
    }

    #[test]
    fn relative_error_of_identical_gradients_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn input_grad_error_flags_correct_adjoints() {
        let x0 = Tensor::new(vec![2, 2], vec![0.4, -0.7, 1.2, 0.3]).unwrap();
        let err = input_grad_error(&x0, DEFAULT_STEP, |tape, x| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {}", err);
    }
}
