//! Single LSTM step assembled from tape primitives.

use crate::error::Result;

use super::tape::{Tape, Var};

/// One LSTM cell's weights, bound to a tape. Gates are ordered
/// [input, forget, cell, output]; `w` maps the step input (hidden × input),
/// `u` the previous hidden state (hidden × hidden), `b` is the gate bias.
pub struct LstmVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
}

/// Advances an LSTM cell by one step over a batch: `x` is (n, input),
/// `h` and `c` are (n, hidden). Returns the new `(h, c)`.
pub fn lstm_step(tape: &mut Tape, p: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let gate = |tape: &mut Tape, idx: usize| -> Result<Var> {
        let from_input = tape.linear(x, p.w[idx], Some(p.b[idx]))?;
        let from_hidden = tape.linear(h, p.u[idx], None)?;
        tape.add(from_input, from_hidden)
    };
    let i = gate(tape, 0)?;
    let f = gate(tape, 1)?;
    let g = gate(tape, 2)?;
    let o = gate(tape, 3)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let c_squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, c_squashed)?;
    Ok((h_new, c_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Real, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vars(tape: &mut Tape, hidden: usize, input: usize, seed: u64) -> LstmVars {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| {
            let t = Tensor::randn(&[rows, cols], 0.0, 0.5, &mut rng);
            tape.leaf(t, true)
        };
        let w = [
            mat(hidden, input),
            mat(hidden, input),
            mat(hidden, input),
            mat(hidden, input),
        ];
        let u = [
            mat(hidden, hidden),
            mat(hidden, hidden),
            mat(hidden, hidden),
            mat(hidden, hidden),
        ];
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut vec = |len: usize| {
            let t = Tensor::randn(&[len], 0.0, 0.5, &mut rng2);
            tape.leaf(t, true)
        };
        let b = [vec(hidden), vec(hidden), vec(hidden), vec(hidden)];
        LstmVars { w, u, b }
    }

    #[test]
    fn step_preserves_batch_and_hidden_shape() {
        let mut tape = Tape::new();
        let p = random_vars(&mut tape, 5, 3, 2);
        let x = tape.constant(Tensor::full(&[2, 3], 0.3));
        let h = tape.constant(Tensor::zeros(&[2, 5]));
        let c = tape.constant(Tensor::zeros(&[2, 5]));
        let (h_new, c_new) = lstm_step(&mut tape, &p, x, h, c).unwrap();
        assert_eq!(tape.value(h_new).shape(), &[2, 5]);
        assert_eq!(tape.value(c_new).shape(), &[2, 5]);
    }

    #[test]
    fn cell_state_stays_bounded_by_gates() {
        let mut tape = Tape::new();
        let p = random_vars(&mut tape, 4, 4, 7);
        let x = tape.constant(Tensor::full(&[1, 4], 10.0));
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let c = tape.constant(Tensor::zeros(&[1, 4]));
        let (h_new, c_new) = lstm_step(&mut tape, &p, x, h, c).unwrap();
        for v in tape.value(h_new).data() {
            assert!(v.abs() <= 1.0 as Real);
        }
        for v in tape.value(c_new).data() {
            assert!(v.abs() <= 1.0 as Real);
        }
    }
}
