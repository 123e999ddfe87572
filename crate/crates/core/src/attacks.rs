//! Fast gradient sign attacks on the pose estimator and the stochastic
//! schedule that triggers them along a trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{loss_total, net, Estimator, EvalMetrics};
use crate::geometry::{quat_to_6d, PoseLabel};
use crate::numerics::{input_gradient, Real, Tensor};
use crate::parallel;
use crate::rng::{self, salt};
use crate::scenegen::{Frame, Image};

/// Strengths tested in the standard sweep, strongest first.
pub const EPSILON_SWEEP: [Real; 6] = [1.0, 0.5, 0.3, 0.1, 0.05, 0.01];

/// Trajectory-level attack parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Max-norm perturbation budget per pixel.
    pub epsilon: Real,
    /// Chance that any unattacked frame starts a burst.
    pub attack_probability: Real,
    /// Frames perturbed per trigger, counting the trigger frame.
    pub burst_length: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::param(
                "epsilon",
                format!("{} must lie in (0, 1]", self.epsilon),
            ));
        }
        if !(0.0..=1.0).contains(&self.attack_probability) {
            return Err(Error::param(
                "attack_probability",
                format!("{} must lie in [0, 1]", self.attack_probability),
            ));
        }
        if self.burst_length == 0 {
            return Err(Error::param("burst_length", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-frame attack flags for one trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackMask(pub Vec<bool>);

impl AttackMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn frame(&self, index: usize) -> bool {
        self.0[index]
    }

    pub fn attacked_count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn attacked_fraction(&self) -> Real {
        if self.0.is_empty() {
            0.0
        } else {
            self.attacked_count() as Real / self.0.len() as Real
        }
    }
}

/// One row of an epsilon sweep; the baseline row carries epsilon 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: Real,
    pub metrics: EvalMetrics,
}

/// Perturb one image against the estimator's own loss:
/// `x' = clip(x + epsilon * sign(grad_x L), 0, 1)`, with the trained
/// uncertainty weights held fixed. `epsilon = 0` returns the input
/// unchanged; any other value outside (0, 1] is an error.
pub fn fgsm(
    est: &Estimator,
    image: &Image,
    label: &PoseLabel,
    epsilon: Real,
) -> Result<Image> {
    if epsilon == 0.0 {
        return Ok(image.clone());
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::param(
            "epsilon",
            format!("{} must be 0 or lie in (0, 1]", epsilon),
        ));
    }
    if !image.in_unit_range() {
        return Err(Error::param(
            "image",
            "pixel values must lie in [0, 1]",
        ));
    }
    let batch = est.batch_from_images(std::iter::once(image))?;
    let grad = input_gradient(&batch, |tape, x| {
        let vars = net::bind(tape, est.params(), false);
        let mut bn = est.bn_state().clone();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _gap) = net::forward(
            tape,
            est.config(),
            &vars,
            &mut bn,
            x,
            false,
            &mut dropout_rng,
        )?;
        let gt_pos = Tensor::new(vec![1, 3], label.position.to_vec())?;
        let gt_att = Tensor::new(vec![1, 6], quat_to_6d(label.attitude).0.to_vec())?;
        loss_total(tape, out, &gt_pos, &gt_att, vars["sigma_p"], vars["sigma_r"])
    })?;

    let mut out = Vec::with_capacity(batch.data().len());
    for (&x, &g) in batch.data().iter().zip(grad.data()) {
        if g == 0.0 || g.is_nan() {
            out.push(x);
            continue;
        }
        let step = if g > 0.0 { epsilon } else { -epsilon };
        let mut v = (x + step).clamp(0.0, 1.0);
        // One ulp of rounding in x + step can push |v - x| past the budget;
        // walk back until the max-norm bound holds as written.
        while (v - x).abs() > epsilon {
            v = if v > x { v.next_down() } else { v.next_up() };
        }
        out.push(v);
    }
    Image::from_chw(image.height, image.width, &out)
}

/// Attack every frame at one strength. Frames are independent, so the work
/// splits across the worker pool.
pub fn fgsm_batch(est: &Estimator, frames: &[Frame], epsilon: Real) -> Result<Vec<Image>> {
    parallel::map(frames, |f| fgsm(est, &f.image, &f.label, epsilon))
        .into_iter()
        .collect()
}

/// Roll the per-frame Bernoulli trigger: each unattacked frame starts a
/// burst of `burst_length` attacked frames with probability
/// `attack_probability`. The mask depends only on the arguments.
pub fn schedule_attacks(frame_count: usize, config: &AttackConfig) -> Result<AttackMask> {
    config.validate()?;
    if frame_count == 0 {
        return Err(Error::param("frame_count", "must be at least 1"));
    }
    let mut mask = vec![false; frame_count];
    let mut trigger_rng = rng::stream(config.seed, salt::ATTACK_SCHEDULE, 0);
    for t in 0..frame_count {
        if mask[t] {
            continue;
        }
        if trigger_rng.gen_bool(config.attack_probability as f64) {
            let end = (t + config.burst_length).min(frame_count);
            mask[t..end].fill(true);
        }
    }
    Ok(AttackMask(mask))
}

/// Evaluate the estimator on clean frames and on every listed attack
/// strength. The first row is the clean baseline (epsilon 0).
pub fn sweep_epsilon(
    est: &Estimator,
    frames: &[Frame],
    eps_list: &[Real],
) -> Result<Vec<SweepRow>> {
    if eps_list.is_empty() {
        return Err(Error::Empty("eps_list"));
    }
    if frames.is_empty() {
        return Err(Error::Empty("frames"));
    }
    let mut rows = vec![SweepRow {
        epsilon: 0.0,
        metrics: est.evaluate(frames)?,
    }];
    for &epsilon in eps_list {
        let images = fgsm_batch(est, frames, epsilon)?;
        let attacked: Vec<Frame> = frames
            .iter()
            .zip(images)
            .map(|(frame, image)| Frame {
                image,
                ..frame.clone()
            })
            .collect();
        rows.push(SweepRow {
            epsilon,
            metrics: est.evaluate(&attacked)?,
        });
    }
    Ok(rows)
}

/// Write the per-frame attack record: frame index, attacked flag, and the
/// strength applied to that frame.
pub fn write_attack_trace<W: std::io::Write>(
    writer: W,
    mask: &AttackMask,
    epsilon: Real,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "attacked", "epsilon"])
        .map_err(|e| Error::Format {
            what: "attack trace",
            detail: e.to_string(),
        })?;
    for (i, &attacked) in mask.0.iter().enumerate() {
        let eps = if attacked { epsilon } else { 0.0 };
        w.write_record([i.to_string(), attacked.to_string(), eps.to_string()])
            .map_err(|e| Error::Format {
                what: "attack trace",
                detail: e.to_string(),
            })?;
    }
    w.flush().map_err(|e| Error::io("attack trace", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorConfig;
    use crate::geometry::{CameraIntrinsics, Quaternion};
    use crate::scenegen::{render_frame, SatelliteModel};

    fn tiny_estimator() -> Estimator {
        let config = EstimatorConfig {
            input_height: 24,
            input_width: 32,
            stem_channels: 4,
            stage_channels: vec![8],
            blocks_per_stage: vec![1],
            gap_width: 12,
            leaky_slope: 0.1,
            dropout_rate: 0.2,
        };
        Estimator::build(config, 9).unwrap()
    }

    fn tiny_frame() -> Frame {
        let model = SatelliteModel::mock_satellite();
        let k = CameraIntrinsics::new(26.0, 20.0, 16.0, 12.0).unwrap();
        let label = PoseLabel {
            position: [0.5, -0.5, 12.0],
            attitude: Quaternion::from_euler_xyz(0.1, 0.2, -0.1),
        };
        render_frame(&model, &label, &k, [0.0, 0.0, -1.0], 24, 32).unwrap()
    }

    #[test]
    fn epsilon_zero_is_bitwise_identity() {
        let est = tiny_estimator();
        let frame = tiny_frame();
        let out = fgsm(&est, &frame.image, &frame.label, 0.0).unwrap();
        assert_eq!(out.data, frame.image.data);
    }

    #[test]
    fn perturbation_respects_the_budget() {
        let est = tiny_estimator();
        let frame = tiny_frame();
        let before = frame.image.data.clone();
        let eps = 0.05;
        let out = fgsm(&est, &frame.image, &frame.label, eps).unwrap();
        assert_eq!(frame.image.data, before, "input must not be mutated");
        assert!(out.in_unit_range());
        let mut moved = 0;
        for (&x, &y) in frame.image.data.iter().zip(&out.data) {
            let delta = (y - x).abs();
            assert!(delta <= eps, "delta {} exceeds epsilon {}", delta, eps);
            if delta > 0.0 {
                moved += 1;
                let clipped = y == 0.0 || y == 1.0;
                if !clipped {
                    assert!(
                        delta >= eps * (1.0 - 1e-12),
                        "unclipped move {} should be the full budget {}",
                        delta,
                        eps
                    );
                }
            }
        }
        assert!(moved > 0, "the gradient should move at least one pixel");
    }

    #[test]
    fn out_of_range_epsilon_is_rejected() {
        let est = tiny_estimator();
        let frame = tiny_frame();
        assert!(fgsm(&est, &frame.image, &frame.label, -0.1).is_err());
        assert!(fgsm(&est, &frame.image, &frame.label, 1.5).is_err());
        assert!(fgsm(&est, &frame.image, &frame.label, Real::NAN).is_err());
    }

    #[test]
    fn saturating_probability_attacks_every_frame() {
        let config = AttackConfig {
            epsilon: 0.1,
            attack_probability: 1.0,
            burst_length: 5,
            seed: 0,
        };
        let mask = schedule_attacks(10, &config).unwrap();
        assert_eq!(mask.attacked_count(), 10);
    }

    #[test]
    fn zero_probability_never_attacks() {
        let config = AttackConfig {
            epsilon: 0.1,
            attack_probability: 0.0,
            burst_length: 5,
            seed: 0,
        };
        let mask = schedule_attacks(64, &config).unwrap();
        assert_eq!(mask.attacked_count(), 0);
    }

    #[test]
    fn bursts_run_to_length_or_trajectory_end() {
        let config = AttackConfig {
            epsilon: 0.1,
            attack_probability: 0.05,
            burst_length: 5,
            seed: 3,
        };
        let mask = schedule_attacks(500, &config).unwrap();
        assert!(mask.attacked_count() > 0);
        let mut run = 0;
        for (i, &attacked) in mask.0.iter().enumerate() {
            if attacked {
                run += 1;
            } else {
                if run > 0 {
                    assert!(run >= 5, "interior run of {} at frame {}", run, i);
                }
                run = 0;
            }
        }
        // A run cut off by the end of the trajectory may be short.
        assert!(run == 0 || run >= 1);
    }

    #[test]
    fn attacked_fraction_matches_the_renewal_rate() {
        // Trigger probability 0.2 with 5-frame bursts yields cycles of a
        // geometric wait (mean 4 clean frames) plus 5 attacked frames, so
        // the long-run attacked fraction is near 5/9.
        let config = AttackConfig {
            epsilon: 0.1,
            attack_probability: 0.2,
            burst_length: 5,
            seed: 17,
        };
        let mask = schedule_attacks(10_000, &config).unwrap();
        let fraction = mask.attacked_fraction();
        assert!(
            (0.5..=0.75).contains(&fraction),
            "attacked fraction {} outside [0.5, 0.75]",
            fraction
        );
    }

    #[test]
    fn schedule_is_replayable() {
        let config = AttackConfig {
            epsilon: 0.1,
            attack_probability: 0.3,
            burst_length: 3,
            seed: 21,
        };
        let a = schedule_attacks(200, &config).unwrap();
        let b = schedule_attacks(200, &config).unwrap();
        assert_eq!(a, b);
        let other = AttackConfig { seed: 22, ..config };
        assert_ne!(a, schedule_attacks(200, &other).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let good = AttackConfig {
            epsilon: 0.1,
            attack_probability: 0.2,
            burst_length: 5,
            seed: 0,
        };
        assert!(good.validate().is_ok());
        assert!(AttackConfig { epsilon: 0.0, ..good }.validate().is_err());
        assert!(AttackConfig { epsilon: 1.1, ..good }.validate().is_err());
        assert!(AttackConfig {
            attack_probability: -0.1,
            ..good
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            burst_length: 0,
            ..good
        }
        .validate()
        .is_err());
        assert!(schedule_attacks(0, &good).is_err());
    }

    #[test]
    fn sweep_has_a_baseline_plus_one_row_per_epsilon() {
        let est = tiny_estimator();
        let frames = vec![tiny_frame(), tiny_frame()];
        let rows = sweep_epsilon(&est, &frames, &[0.1, 0.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].epsilon, 0.0);
        // An explicit zero entry reproduces the clean baseline.
        assert_eq!(rows[0].metrics, rows[2].metrics);
        assert!(sweep_epsilon(&est, &frames, &[]).is_err());
        assert!(sweep_epsilon(&est, &[], &[0.1]).is_err());
    }

    #[test]
    fn trace_lists_every_frame_with_its_strength() {
        let mask = AttackMask(vec![false, true, true, false]);
        let mut buf = Vec::new();
        write_attack_trace(&mut buf, &mask, 0.3).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "frame,attacked,epsilon");
        assert_eq!(lines[1], "0,false,0");
        assert_eq!(lines[2], "1,true,0.3");
    }
}
