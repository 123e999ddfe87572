//! Homoscedastic-uncertainty pose loss.
//!
//! The position and attitude branches are balanced by two trainable
//! log-variance scalars: each branch contributes `exp(-2*sigma) * L` plus a
//! `2*sigma` regularizer, where `L` is the sum of per-sample Euclidean error
//! norms for that branch.

use crate::error::Result;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Builds the total loss on the tape from the 9-column prediction,
/// ground-truth position `[N, 3]` and attitude `[N, 6]` tensors, and the two
/// uncertainty scalars.
pub fn loss_total(
    tape: &mut Tape,
    pred: Var,
    gt_pos: &Tensor,
    gt_att: &Tensor,
    sigma_p: Var,
    sigma_r: Var,
) -> Result<Var> {
    let pred_pos = tape.slice_cols(pred, 0, 3)?;
    let pred_att = tape.slice_cols(pred, 3, 6)?;
    let gt_pos = tape.constant(gt_pos.clone());
    let gt_att = tape.constant(gt_att.clone());
    let diff_pos = tape.sub(pred_pos, gt_pos)?;
    let diff_att = tape.sub(pred_att, gt_att)?;
    let lp = tape.sum_row_norms(diff_pos)?;
    let lr = tape.sum_row_norms(diff_att)?;
    let weight_p = tape.scale(sigma_p, -2.0);
    let weight_p = tape.exp(weight_p);
    let weight_r = tape.scale(sigma_r, -2.0);
    let weight_r = tape.exp(weight_r);
    let term_p = tape.mul(weight_p, lp)?;
    let term_r = tape.mul(weight_r, lr)?;
    let sigma_sum = tape.add(sigma_p, sigma_r)?;
    let reg = tape.scale(sigma_sum, 2.0);
    let branches = tape.add(term_p, term_r)?;
    tape.add(branches, reg)
}

/// Closed-form value of the loss for known branch errors and sigmas.
pub fn loss_value(lp: Real, lr: Real, sigma_p: Real, sigma_r: Real) -> Real {
    (-2.0 * sigma_p).exp() * lp + (-2.0 * sigma_r).exp() * lr + 2.0 * (sigma_p + sigma_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_to_6d, Quaternion};

    fn build_loss(
        pred_rows: &[[Real; 9]],
        gt_pos: &[[Real; 3]],
        gt_att: &[[Real; 6]],
        sigma_p: Real,
        sigma_r: Real,
    ) -> (Tape, Var, Var, Var) {
        let n = pred_rows.len();
        let pred = Tensor::new(
            vec![n, 9],
            pred_rows.iter().flatten().copied().collect(),
        )
        .unwrap();
        let pos = Tensor::new(vec![n, 3], gt_pos.iter().flatten().copied().collect()).unwrap();
        let att = Tensor::new(vec![n, 6], gt_att.iter().flatten().copied().collect()).unwrap();
        let mut tape = Tape::new();
        let pred = tape.leaf(pred, false);
        let sp = tape.leaf(Tensor::new(vec![1], vec![sigma_p]).unwrap(), true);
        let sr = tape.leaf(Tensor::new(vec![1], vec![sigma_r]).unwrap(), true);
        let loss = loss_total(&mut tape, pred, &pos, &att, sp, sr).unwrap();
        (tape, loss, sp, sr)
    }

    #[test]
    fn zero_sigmas_reduce_to_branch_sum() {
        let pred = [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let gt_pos = [[0.0, 0.0, 0.0]];
        let gt_att = [[0.0, 2.0, 0.0, 0.0, 0.0, 0.0]];
        let (tape, loss, _, _) = build_loss(&pred, &gt_pos, &gt_att, 0.0, 0.0);
        // Lp = 1, Lr = 2, sigmas contribute nothing.
        assert!((tape.value(loss).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_with_zero_sigmas_is_zero() {
        let pred = [[0.5, -1.5, 10.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]];
        let gt_pos = [[0.5, -1.5, 10.0]];
        let gt_att = [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]];
        let (tape, loss, _, _) = build_loss(&pred, &gt_pos, &gt_att, 0.0, 0.0);
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn unit_errors_at_half_sigma_match_closed_form() {
        let pred = [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]];
        let gt_pos = [[0.0, 0.0, 0.0]];
        let gt_att = [[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let (tape, loss, _, _) = build_loss(&pred, &gt_pos, &gt_att, 0.5, 0.5);
        let expected = 2.0 * (-1.0 as Real).exp() + 2.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((loss_value(1.0, 1.0, 0.5, 0.5) - expected).abs() < 1e-15);
    }

    #[test]
    fn sigma_gradient_matches_closed_form() {
        let pred: [[Real; 9]; 2] = [
            [1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            [-1.0, 0.5, 9.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
        ];
        let gt_pos: [[Real; 3]; 2] = [[0.5, 1.0, 4.0], [0.0, 0.0, 10.0]];
        let gt_att = [
            [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        ];
        let sigma_p = 0.3;
        let lp: Real = pred
            .iter()
            .zip(gt_pos.iter())
            .map(|(p, g)| {
                ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
            })
            .sum();
        let (tape, loss, sp, _) = build_loss(&pred, &gt_pos, &gt_att, sigma_p, -0.2);
        let grads = tape.backward(loss).unwrap();
        let got = grads.get(sp).unwrap().data()[0];
        let expected = -2.0 * (-2.0 * sigma_p).exp() * lp + 2.0;
        assert!(
            (got - expected).abs() < 1e-9,
            "sigma_p gradient {} vs closed form {}",
            got,
            expected
        );
    }

    #[test]
    fn antipodal_quaternions_share_a_label() {
        let q = Quaternion::from_euler_xyz(0.3, -0.5, 0.9);
        let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
        assert_eq!(quat_to_6d(q).0, quat_to_6d(neg).0);
    }
}
