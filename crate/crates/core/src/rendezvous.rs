//! Closed-loop approach simulation: render the target at the true relative
//! pose, estimate, optionally attack and detect, then command the next move
//! from the estimate. Produces attack-success matrices and per-trajectory
//! detection accuracies.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, schedule_attacks, AttackConfig};
use crate::detector::{detect_all, detection_accuracy, DetectionRecord, Detector};
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::explain::{shap_for_frames, BackgroundSet};
use crate::geometry::{CameraIntrinsics, PoseLabel, Rotation6D, Vec3};
use crate::numerics::Real;
use crate::parallel;
use crate::scenegen::{
    expand_trajectory, render_frame, rotation_sequence, Image, LateralProfile, RotationPolicy,
    SatelliteModel, TrajectorySpec,
};

/// Target box the spacecraft steers into.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceState {
    pub target: Vec3,
    /// Per-axis distance from the target that counts as arrived.
    pub tolerance: Real,
    /// Largest commanded move per axis per frame.
    pub max_step: Real,
}

impl Default for GuidanceState {
    fn default() -> Self {
        Self {
            target: [0.0, 0.0, 10.0],
            tolerance: 1.0,
            max_step: 1.0,
        }
    }
}

impl GuidanceState {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::param("tolerance", "must be positive and finite"));
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(Error::param("max_step", "must be positive and finite"));
        }
        if self.target.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("target", "must be finite"));
        }
        Ok(())
    }

    pub fn reached(&self, position: Vec3) -> bool {
        position
            .iter()
            .zip(&self.target)
            .all(|(p, t)| (p - t).abs() <= self.tolerance)
    }
}

fn step_toward(p_est: Vec3, p_tar: Vec3, max_step: Real) -> Vec3 {
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let diff = p_est[axis] - p_tar[axis];
        out[axis] = p_est[axis] - if diff >= max_step { max_step } else { diff };
    }
    out
}

/// One guidance update: per axis, retreat by the full step while the
/// estimated offset is at least one step, otherwise close the remaining
/// offset exactly.
pub fn guidance_step(p_est: Vec3, p_tar: Vec3) -> Vec3 {
    step_toward(p_est, p_tar, 1.0)
}

/// Renderer inputs shared by every frame of an experiment.
#[derive(Clone, Debug)]
pub struct SceneSetup {
    pub model: SatelliteModel,
    pub camera: CameraIntrinsics,
    pub image_height: usize,
    pub image_width: usize,
    pub light_dir: Vec3,
}

impl SceneSetup {
    /// Desk-scale defaults used across acceptance runs.
    pub fn desk() -> Self {
        Self {
            model: SatelliteModel::mock_satellite(),
            camera: CameraIntrinsics::desk_default(),
            image_height: 90,
            image_width: 120,
            light_dir: [0.0, 0.0, -1.0],
        }
    }
}

/// Everything a closed-loop episode needs besides the weights.
#[derive(Clone, Debug)]
pub struct EpisodeScene {
    pub setup: SceneSetup,
    pub start_position: Vec3,
    pub rotation_policy: RotationPolicy,
    pub guidance: GuidanceState,
    pub seed: u64,
}

/// A single burst fired when the true approach crosses a distance threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAttack {
    pub epsilon: Real,
    /// Attack begins once true z is at or below this distance.
    pub start_distance: Real,
    pub burst_length: usize,
}

impl EpisodeAttack {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::param(
                "epsilon",
                format!("{} must lie in (0, 1]", self.epsilon),
            ));
        }
        if !(self.start_distance.is_finite() && self.start_distance > 0.0) {
            return Err(Error::param("start_distance", "must be positive and finite"));
        }
        if self.burst_length == 0 {
            return Err(Error::param("burst_length", "must be at least 1"));
        }
        Ok(())
    }
}

/// Signature-based detection plugged into an episode.
pub struct DetectionRig<'a> {
    pub detector: &'a Detector,
    pub background: &'a BackgroundSet,
}

/// One frame of an episode trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFrame {
    pub frame_index: usize,
    pub true_pose: PoseLabel,
    pub estimated_position: Vec3,
    pub estimated_attitude: Rotation6D,
    pub attacked: bool,
    pub detection: Option<DetectionRecord>,
}

/// Attack verdict for an episode that contained attacked frames: the attack
/// succeeds exactly when the spacecraft misses the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackOutcome {
    Success,
    Failure,
}

/// Full record of one closed-loop run.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub reached_target: bool,
    pub frames_elapsed: usize,
    pub frames: Vec<EpisodeFrame>,
    /// Present exactly when at least one frame was attacked.
    pub attack_outcome: Option<AttackOutcome>,
}

/// Run the loop: render at the true pose, perturb scheduled frames, estimate,
/// optionally explain and detect, command the move from the estimate, apply
/// it to the true state, and stop once the true position enters the target
/// box or the frame budget runs out.
pub fn run_episode(
    scene: &EpisodeScene,
    est: &Estimator,
    attack: Option<&EpisodeAttack>,
    rig: Option<&DetectionRig>,
    max_frames: usize,
) -> Result<EpisodeResult> {
    scene.guidance.validate()?;
    if let Some(a) = attack {
        a.validate()?;
    }
    if max_frames == 0 {
        return Err(Error::param("max_frames", "must be at least 1"));
    }
    let attitudes = rotation_sequence(scene.rotation_policy, scene.seed, max_frames)?;

    let mut p_true = scene.start_position;
    let mut frames = Vec::new();
    let mut reached = false;
    let mut burst_started = false;
    let mut attacked_so_far = 0usize;

    for (i, attitude) in attitudes.into_iter().enumerate() {
        let true_pose = PoseLabel {
            position: p_true,
            attitude,
        };
        let frame = render_frame(
            &scene.setup.model,
            &true_pose,
            &scene.setup.camera,
            scene.setup.light_dir,
            scene.setup.image_height,
            scene.setup.image_width,
        )?;

        let attacked = match attack {
            Some(a) => {
                if !burst_started && p_true[2] <= a.start_distance {
                    burst_started = true;
                }
                burst_started && attacked_so_far < a.burst_length
            }
            None => false,
        };
        let image: Image = if attacked {
            attacked_so_far += 1;
            fgsm(est, &frame.image, &true_pose, attack.unwrap().epsilon)?
        } else {
            frame.image
        };

        let batch = est.batch_from_images(std::iter::once(&image))?;
        let estimate = est
            .estimate_batch(&batch)?
            .pop()
            .expect("one estimate per image");

        let detection = match rig {
            Some(r) => {
                let mut sigs =
                    shap_for_frames(est, std::slice::from_ref(&estimate.gap_activation), r.background)?;
                let mut sig = sigs.pop().expect("one signature per frame");
                sig.frame_index = i;
                sig.attacked = attacked;
                sig.epsilon = if attacked { attack.unwrap().epsilon } else { 0.0 };
                Some(detect_all(r.detector, &[sig])?.pop().expect("one record"))
            }
            None => None,
        };

        frames.push(EpisodeFrame {
            frame_index: i,
            true_pose,
            estimated_position: estimate.position,
            estimated_attitude: estimate.attitude6d,
            attacked,
            detection,
        });

        let commanded = step_toward(estimate.position, scene.guidance.target, scene.guidance.max_step);
        for axis in 0..3 {
            p_true[axis] += commanded[axis] - estimate.position[axis];
        }
        if scene.guidance.reached(p_true) {
            reached = true;
            break;
        }
    }

    let any_attacked = frames.iter().any(|f| f.attacked);
    Ok(EpisodeResult {
        reached_target: reached,
        frames_elapsed: frames.len(),
        frames,
        attack_outcome: any_attacked.then(|| {
            if reached {
                AttackOutcome::Failure
            } else {
                AttackOutcome::Success
            }
        }),
    })
}

/// One cell of an attack-success table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixCell {
    Success,
    Failure,
    Untested,
}

/// Attack outcomes over the (start distance × burst length) grid at one ε.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub epsilon: Real,
    pub start_distances: Vec<Real>,
    pub burst_lengths: Vec<usize>,
    /// Row per start distance, column per burst length.
    pub cells: Vec<Vec<MatrixCell>>,
}

impl ExperimentMatrix {
    pub fn cell(&self, start_idx: usize, burst_idx: usize) -> MatrixCell {
        self.cells[start_idx][burst_idx]
    }

    pub fn success_count(&self) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| **c == MatrixCell::Success)
            .count()
    }
}

/// Run one episode per (start distance, burst length) cell at a fixed ε.
pub fn attack_matrix(
    scene: &EpisodeScene,
    est: &Estimator,
    epsilon: Real,
    start_distances: &[Real],
    burst_lengths: &[usize],
    max_frames: usize,
) -> Result<ExperimentMatrix> {
    if start_distances.is_empty() || burst_lengths.is_empty() {
        return Err(Error::Empty("attack matrix axes"));
    }
    let cols = burst_lengths.len();
    let results = parallel::map_indexed(start_distances.len() * cols, |idx| {
        let attack = EpisodeAttack {
            epsilon,
            start_distance: start_distances[idx / cols],
            burst_length: burst_lengths[idx % cols],
        };
        run_episode(scene, est, Some(&attack), None, max_frames)
            .map(|r| match r.attack_outcome {
                Some(AttackOutcome::Success) => MatrixCell::Success,
                Some(AttackOutcome::Failure) => MatrixCell::Failure,
                // The burst never fired (threshold never crossed), so the
                // cell provides no attack evidence.
                None => MatrixCell::Untested,
            })
    });
    let mut flat = Vec::with_capacity(results.len());
    for r in results {
        flat.push(r?);
    }
    Ok(ExperimentMatrix {
        epsilon,
        start_distances: start_distances.to_vec(),
        burst_lengths: burst_lengths.to_vec(),
        cells: flat.chunks(cols).map(|row| row.to_vec()).collect(),
    })
}

/// Accuracy of the detector over one trajectory at one attack strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub epsilon: Real,
    pub trajectory: usize,
    pub accuracy: Real,
    pub attacked_frames: usize,
    pub total_frames: usize,
}

/// The three held-out approach paths detection accuracy is reported on:
/// projectile arcs from distinct corners with a gently rotating target.
pub fn test_trajectories(base_seed: u64, frame_count: usize) -> Vec<TrajectorySpec> {
    [[25.0, 15.0], [-25.0, 15.0], [-25.0, -15.0]]
        .iter()
        .enumerate()
        .map(|(i, &[x, y])| TrajectorySpec {
            start_position: [x, y, 60.0],
            end_position: [0.0, 0.0, 10.0],
            frame_count,
            rotation_policy: RotationPolicy::UniformWithinBound { bound_deg: 10.0 },
            lateral_profile: LateralProfile::Projectile,
            z_rate: None,
            seed: base_seed.wrapping_add(i as u64),
        })
        .collect()
}

/// Render each trajectory, attack a scheduled subset of frames at each ε,
/// and score the detector on every frame's signature. ε = 0 rows measure the
/// false-positive side with no frames attacked.
pub fn detection_run(
    setup: &SceneSetup,
    est: &Estimator,
    det: &Detector,
    background: &BackgroundSet,
    trajectories: &[TrajectorySpec],
    eps_list: &[Real],
    attack_probability: Real,
    burst_length: usize,
    seed: u64,
) -> Result<Vec<DetectionRow>> {
    if trajectories.is_empty() || eps_list.is_empty() {
        return Err(Error::Empty("detection run inputs"));
    }
    let mut rows = Vec::with_capacity(trajectories.len() * eps_list.len());
    for (ti, spec) in trajectories.iter().enumerate() {
        let poses = expand_trajectory(spec)?;
        let clean = parallel::map(&poses, |pose| {
            render_frame(
                &setup.model,
                pose,
                &setup.camera,
                setup.light_dir,
                setup.image_height,
                setup.image_width,
            )
        });
        let clean: Vec<_> = clean.into_iter().collect::<Result<_>>()?;

        for (ei, &epsilon) in eps_list.iter().enumerate() {
            let row_seed = seed.wrapping_add((ti * eps_list.len() + ei) as u64);
            let mask = if epsilon == 0.0 {
                crate::attacks::AttackMask(vec![false; poses.len()])
            } else {
                schedule_attacks(
                    poses.len(),
                    &AttackConfig {
                        epsilon,
                        attack_probability,
                        burst_length,
                        seed: row_seed,
                    },
                )?
            };

            let images = parallel::map_indexed(poses.len(), |i| -> Result<Image> {
                if mask.frame(i) {
                    fgsm(est, &clean[i].image, &poses[i], epsilon)
                } else {
                    Ok(clean[i].image.clone())
                }
            });
            let images: Vec<Image> = images.into_iter().collect::<Result<_>>()?;

            let mut gaps = Vec::with_capacity(images.len());
            for chunk in images.chunks(32) {
                let batch = est.batch_from_images(chunk.iter())?;
                for e in est.estimate_batch(&batch)? {
                    gaps.push(e.gap_activation);
                }
            }
            let mut sigs = shap_for_frames(est, &gaps, background)?;
            for (i, sig) in sigs.iter_mut().enumerate() {
                sig.frame_index = i;
                sig.attacked = mask.frame(i);
                sig.epsilon = if mask.frame(i) { epsilon } else { 0.0 };
            }
            let records = detect_all(det, &sigs)?;
            rows.push(DetectionRow {
                epsilon,
                trajectory: ti,
                accuracy: detection_accuracy(&records)?,
                attacked_frames: mask.attacked_count(),
                total_frames: poses.len(),
            });
        }
    }
    Ok(rows)
}

/// Delimited success table: one row per start distance, one column per
/// burst length.
pub fn write_matrix<W: Write>(writer: W, matrix: &ExperimentMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["start_distance_m".to_string()];
    header.extend(matrix.burst_lengths.iter().map(|b| format!("burst_{}", b)));
    w.write_record(&header).map_err(|e| Error::Format {
        what: "attack matrix",
        detail: e.to_string(),
    })?;
    for (si, row) in matrix.cells.iter().enumerate() {
        let mut record = vec![format!("{}", matrix.start_distances[si])];
        record.extend(row.iter().map(|c| {
            match c {
                MatrixCell::Success => "success",
                MatrixCell::Failure => "failure",
                MatrixCell::Untested => "",
            }
            .to_string()
        }));
        w.write_record(&record).map_err(|e| Error::Format {
            what: "attack matrix",
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("attack matrix", e))
}

/// Delimited accuracy table from a detection run.
pub fn write_detection_table<W: Write>(writer: W, rows: &[DetectionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epsilon", "trajectory", "accuracy_percent", "attacked_frames", "total_frames"])
        .map_err(|e| Error::Format {
            what: "detection table",
            detail: e.to_string(),
        })?;
    for r in rows {
        w.write_record([
            format!("{}", r.epsilon),
            r.trajectory.to_string(),
            format!("{:.4}", r.accuracy),
            r.attacked_frames.to_string(),
            r.total_frames.to_string(),
        ])
        .map_err(|e| Error::Format {
            what: "detection table",
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("detection table", e))
}

/// Per-frame episode trace for replay and plotting.
pub fn write_episode_trace<W: Write>(writer: W, episode: &EpisodeResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "frame", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z", "attacked", "detected",
        "score",
    ])
    .map_err(|e| Error::Format {
        what: "episode trace",
        detail: e.to_string(),
    })?;
    for f in &episode.frames {
        let (detected, score) = match &f.detection {
            Some(d) => (d.predicted.to_string(), format!("{:.6}", d.score)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            f.frame_index.to_string(),
            format!("{:.6}", f.true_pose.position[0]),
            format!("{:.6}", f.true_pose.position[1]),
            format!("{:.6}", f.true_pose.position[2]),
            format!("{:.6}", f.estimated_position[0]),
            format!("{:.6}", f.estimated_position[1]),
            format!("{:.6}", f.estimated_position[2]),
            f.attacked.to_string(),
            detected,
            score,
        ])
        .map_err(|e| Error::Format {
            what: "episode trace",
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("episode trace", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorConfig;

    #[test]
    fn guidance_matches_the_published_cases() {
        let target = [0.0, 0.0, 10.0];
        assert_eq!(guidance_step([0.0, 0.0, 60.0], target), [0.0, 0.0, 59.0]);
        assert_eq!(guidance_step([0.0, 0.0, 10.4], target), [0.0, 0.0, 10.0]);
        assert_eq!(guidance_step(target, target), target);
        // Each axis moves independently.
        assert_eq!(
            guidance_step([5.0, -0.25, 10.5], target),
            [4.0, 0.0, 10.0]
        );
    }

    #[test]
    fn guidance_with_small_estimate_noise_converges() {
        let guidance = GuidanceState::default();
        let mut p_true = [0.0, 0.0, 60.0];
        let mut rng_state = 11u64;
        let mut noise = || {
            // Tiny xorshift keeps the test free of estimator weights.
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            ((rng_state % 1000) as Real / 1000.0 - 0.5) * 0.6
        };
        let mut reached_at = None;
        for i in 0..70 {
            let p_est = [
                p_true[0] + noise(),
                p_true[1] + noise(),
                p_true[2] + noise(),
            ];
            let commanded = step_toward(p_est, guidance.target, guidance.max_step);
            for axis in 0..3 {
                p_true[axis] += commanded[axis] - p_est[axis];
            }
            if guidance.reached(p_true) {
                reached_at = Some(i + 1);
                break;
            }
        }
        // Fifty meters of closure at one meter per frame, minus the one
        // meter of box tolerance, gives the floor.
        let frames = reached_at.expect("sixty meters at one meter per frame plus noise");
        assert!(frames >= 48 && frames <= 60, "took {} frames", frames);
    }

    fn tiny_scene(start: Vec3, seed: u64) -> EpisodeScene {
        EpisodeScene {
            setup: SceneSetup {
                model: SatelliteModel::mock_satellite(),
                camera: CameraIntrinsics::new(26.0, 20.0, 16.0, 12.0).unwrap(),
                image_height: 24,
                image_width: 32,
                light_dir: [0.0, 0.0, -1.0],
            },
            start_position: start,
            rotation_policy: RotationPolicy::Tumble {
                rate_deg_per_frame: 0.5,
            },
            guidance: GuidanceState::default(),
            seed,
        }
    }

    fn tiny_estimator() -> Estimator {
        let config = EstimatorConfig {
            input_height: 24,
            input_width: 32,
            stem_channels: 2,
            stage_channels: vec![4],
            blocks_per_stage: vec![1],
            gap_width: 10,
            leaky_slope: 0.1,
            dropout_rate: 0.0,
        };
        Estimator::build(config, 3).unwrap()
    }

    #[test]
    fn episodes_are_reproducible_and_bounded() {
        let scene = tiny_scene([0.0, 0.0, 20.0], 5);
        let est = tiny_estimator();
        let a = run_episode(&scene, &est, None, None, 12).unwrap();
        let b = run_episode(&scene, &est, None, None, 12).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.reached_target, b.reached_target);
        assert!(a.frames_elapsed <= 12);
        assert_eq!(a.frames_elapsed, a.frames.len());
        assert!(a.attack_outcome.is_none());
        assert!(a.frames.iter().all(|f| !f.attacked));
        assert!(a.frames.iter().all(|f| f.detection.is_none()));
    }

    #[test]
    fn bursts_fire_at_the_distance_threshold() {
        let scene = tiny_scene([0.0, 0.0, 20.0], 5);
        let est = tiny_estimator();
        let attack = EpisodeAttack {
            epsilon: 0.1,
            start_distance: 20.0,
            burst_length: 3,
        };
        let result = run_episode(&scene, &est, Some(&attack), None, 15).unwrap();
        let flags: Vec<bool> = result.frames.iter().map(|f| f.attacked).collect();
        let first = flags.iter().position(|&a| a).expect("burst fired");
        let first_crossing = result
            .frames
            .iter()
            .position(|f| f.true_pose.position[2] <= 20.0)
            .unwrap();
        assert_eq!(first, first_crossing);
        let attacked_total = flags.iter().filter(|&&a| a).count();
        assert_eq!(attacked_total, 3);
        assert!(flags[first..first + 3].iter().all(|&a| a));
        assert!(result.attack_outcome.is_some());
    }

    #[test]
    fn attack_matrix_covers_the_grid_deterministically() {
        let scene = tiny_scene([0.0, 0.0, 16.0], 2);
        let est = tiny_estimator();
        // Thresholds at or above the start altitude so every cell's burst
        // fires on the first frame.
        let starts = [16.0, 18.0];
        let bursts = [1usize, 2];
        let a = attack_matrix(&scene, &est, 0.3, &starts, &bursts, 8).unwrap();
        assert_eq!(a.start_distances, starts);
        assert_eq!(a.burst_lengths, bursts);
        assert_eq!(a.cells.len(), 2);
        assert!(a.cells.iter().all(|row| row.len() == 2));
        assert!(a
            .cells
            .iter()
            .flatten()
            .all(|c| *c != MatrixCell::Untested));
        let b = attack_matrix(&scene, &est, 0.3, &starts, &bursts, 8).unwrap();
        assert_eq!(a.cells, b.cells);
        assert!(matches!(
            attack_matrix(&scene, &est, 0.3, &[], &bursts, 8),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn a_threshold_never_crossed_leaves_the_cell_untested() {
        // The estimator is untrained, so eight frames from z = 20 never
        // descend to 2 m; the burst never fires.
        let scene = tiny_scene([0.0, 0.0, 20.0], 2);
        let est = tiny_estimator();
        let m = attack_matrix(&scene, &est, 0.3, &[2.0], &[2], 8).unwrap();
        assert_eq!(m.cell(0, 0), MatrixCell::Untested);
    }

    #[test]
    fn matrix_and_trace_files_have_the_expected_shape() {
        let matrix = ExperimentMatrix {
            epsilon: 0.5,
            start_distances: vec![60.0, 50.0],
            burst_lengths: vec![5, 10],
            cells: vec![
                vec![MatrixCell::Failure, MatrixCell::Success],
                vec![MatrixCell::Success, MatrixCell::Untested],
            ],
        };
        let mut buf = Vec::new();
        write_matrix(&mut buf, &matrix).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "start_distance_m,burst_5,burst_10");
        assert_eq!(lines[1], "60,failure,success");
        assert_eq!(lines[2], "50,success,");

        let scene = tiny_scene([0.0, 0.0, 14.0], 1);
        let est = tiny_estimator();
        let episode = run_episode(&scene, &est, None, None, 3).unwrap();
        let mut buf = Vec::new();
        write_episode_trace(&mut buf, &episode).unwrap();
        let trace = String::from_utf8(buf).unwrap();
        assert_eq!(trace.lines().count(), episode.frames_elapsed + 1);
        assert!(trace.starts_with("frame,true_x"));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let scene = tiny_scene([0.0, 0.0, 20.0], 5);
        let est = tiny_estimator();
        assert!(run_episode(&scene, &est, None, None, 0).is_err());

        let mut bad = scene.clone();
        bad.guidance.tolerance = 0.0;
        assert!(run_episode(&bad, &est, None, None, 4).is_err());

        let attack = EpisodeAttack {
            epsilon: 0.0,
            start_distance: 10.0,
            burst_length: 1,
        };
        assert!(run_episode(&scene, &est, Some(&attack), None, 4).is_err());
    }

    #[test]
    fn detection_rows_cover_every_pair_and_replay() {
        let scene = tiny_scene([0.0, 0.0, 20.0], 5);
        let est = tiny_estimator();
        let images: Vec<Image> = (0..4)
            .map(|i| {
                let pose = PoseLabel {
                    position: [0.0, 0.0, 12.0 + i as Real],
                    attitude: crate::geometry::Quaternion::IDENTITY,
                };
                render_frame(
                    &scene.setup.model,
                    &pose,
                    &scene.setup.camera,
                    scene.setup.light_dir,
                    24,
                    32,
                )
                .unwrap()
                .image
            })
            .collect();
        let background = crate::explain::collect_background(&est, &images, 3, 1).unwrap();
        let det = Detector::build(
            crate::detector::DetectorConfig {
                lstm_hidden: 6,
                fc_width: 4,
                ..crate::detector::DetectorConfig::new(10, 4)
            },
            &est.fingerprint(),
        )
        .unwrap();

        let trajectories: Vec<TrajectorySpec> = test_trajectories(9, 12)
            .into_iter()
            .take(2)
            .collect();
        let rows = detection_run(
            &scene.setup,
            &est,
            &det,
            &background,
            &trajectories,
            &[0.0, 0.3],
            0.5,
            2,
            77,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.accuracy >= 0.0 && r.accuracy <= 100.0);
            assert_eq!(r.total_frames, 12);
            if r.epsilon == 0.0 {
                assert_eq!(r.attacked_frames, 0);
            } else {
                assert!(r.attacked_frames > 0);
            }
        }
        let again = detection_run(
            &scene.setup,
            &est,
            &det,
            &background,
            &trajectories,
            &[0.0, 0.3],
            0.5,
            2,
            77,
        )
        .unwrap();
        assert_eq!(rows, again);

        let mut buf = Vec::new();
        write_detection_table(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
