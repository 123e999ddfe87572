//! Approach trajectory expansion: deterministic pose sequences for the
//! camera-to-target geometry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseLabel, Quaternion, Vec3};
use crate::numerics::Real;
use crate::rng::{self, salt};

/// Target attitude policy along a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RotationPolicy {
    /// Identity attitude on every frame.
    Fixed,
    /// Independent per-frame rotation with each Euler angle drawn uniformly
    /// from [-bound, bound] degrees.
    UniformWithinBound { bound_deg: Real },
    /// Continuous rotation about a single seeded axis, advancing by a fixed
    /// angle per frame: a smoothly tumbling target.
    Tumble { rate_deg_per_frame: Real },
}

impl RotationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RotationPolicy::Fixed => Ok(()),
            RotationPolicy::UniformWithinBound { bound_deg } => {
                if !(bound_deg > 0.0 && bound_deg <= 180.0) {
                    return Err(Error::param(
                        "rotation bound",
                        format!("{} degrees must lie in (0, 180]", bound_deg),
                    ));
                }
                Ok(())
            }
            RotationPolicy::Tumble { rate_deg_per_frame } => {
                if !(rate_deg_per_frame.is_finite()
                    && rate_deg_per_frame != 0.0
                    && rate_deg_per_frame.abs() <= 180.0)
                {
                    return Err(Error::param(
                        "tumble rate",
                        format!(
                            "{} degrees per frame must be nonzero and at most 180",
                            rate_deg_per_frame
                        ),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Target attitude for each of `count` frames under a policy. Frame `i`
/// always sees the same attitude for a given (policy, seed), independent of
/// `count`.
pub fn rotation_sequence(
    policy: RotationPolicy,
    seed: u64,
    count: usize,
) -> Result<Vec<Quaternion>> {
    policy.validate()?;
    let tumble_axis = match policy {
        RotationPolicy::Tumble { .. } => {
            let mut rng = rng::stream(seed, salt::TRAJECTORY, 0);
            // Draws run in f64 so the stream is identical across float-width
            // builds. Rejection keeps the direction uniform over the sphere.
            loop {
                let v = [
                    rng.gen_range(-1.0f64..=1.0),
                    rng.gen_range(-1.0f64..=1.0),
                    rng.gen_range(-1.0f64..=1.0),
                ];
                let norm_sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                if norm_sq > 1e-4 && norm_sq <= 1.0 {
                    let norm = norm_sq.sqrt();
                    break Some([
                        (v[0] / norm) as Real,
                        (v[1] / norm) as Real,
                        (v[2] / norm) as Real,
                    ]);
                }
            }
        }
        _ => None,
    };
    (0..count)
        .map(|i| match policy {
            RotationPolicy::Fixed => Ok(Quaternion::IDENTITY),
            RotationPolicy::UniformWithinBound { bound_deg } => {
                let mut rng = rng::stream(seed, salt::TRAJECTORY, i as u64);
                let bound = (bound_deg as f64).to_radians();
                let rx = rng.gen_range(-bound..=bound) as Real;
                let ry = rng.gen_range(-bound..=bound) as Real;
                let rz = rng.gen_range(-bound..=bound) as Real;
                Ok(Quaternion::from_euler_xyz(rx, ry, rz))
            }
            RotationPolicy::Tumble { rate_deg_per_frame } => {
                let angle = (rate_deg_per_frame * i as Real).to_radians();
                Quaternion::from_axis_angle(tumble_axis.unwrap(), angle)
            }
        })
        .collect()
}

/// Lateral (x, y) motion while z advances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LateralProfile {
    /// Straight line from start to end.
    Linear,
    /// Quadratic arc that overshoots the chord, peaks inside the
    /// trajectory, and lands on (0, 0). Requires a (0, 0, z) end position.
    Projectile,
}

/// How high above the start offset the projectile arc swings, as a fraction
/// of that offset. 0.375 puts the vertex at one sixth of the trajectory with
/// a 4.2% overshoot, which keeps the corner starts inside the camera frame.
pub const PROJECTILE_BULGE: Real = 0.375;

/// Declarative description of one approach sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub start_position: Vec3,
    pub end_position: Vec3,
    pub frame_count: usize,
    pub rotation_policy: RotationPolicy,
    pub lateral_profile: LateralProfile,
    /// Per-frame decrease in z. When set it must equal the value implied by
    /// the endpoints and frame count.
    pub z_rate: Option<Real>,
    pub seed: u64,
}

impl TrajectorySpec {
    /// Straight-in approach from `start` to (0, 0, 10) with a fixed attitude.
    pub fn straight_approach(start: Vec3, frame_count: usize, seed: u64) -> Self {
        Self {
            start_position: start,
            end_position: [0.0, 0.0, 10.0],
            frame_count,
            rotation_policy: RotationPolicy::Fixed,
            lateral_profile: LateralProfile::Linear,
            z_rate: None,
            seed,
        }
    }

    /// The thirteen standard training sequences: a centered approach, four
    /// corner starts, then four inner-corner starts with random target
    /// rotation, repeated once more with fresh seeds. All run from z = 60 m
    /// to (0, 0, 10).
    pub fn standard_sequences(base_seed: u64, frame_count: usize) -> Vec<Self> {
        let starts: [(Vec3, Real); 13] = [
            ([0.0, 0.0, 60.0], 0.0),
            ([-15.0, -25.0, 60.0], 0.0),
            ([-15.0, 25.0, 60.0], 0.0),
            ([15.0, 25.0, 60.0], 0.0),
            ([15.0, -25.0, 60.0], 0.0),
            ([-15.0, -10.0, 60.0], 10.0),
            ([-15.0, 10.0, 60.0], 10.0),
            ([15.0, 10.0, 60.0], 10.0),
            ([15.0, -10.0, 60.0], 10.0),
            ([-15.0, -10.0, 60.0], 10.0),
            ([-15.0, 10.0, 60.0], 10.0),
            ([15.0, 10.0, 60.0], 10.0),
            ([15.0, -10.0, 60.0], 10.0),
        ];
        starts
            .iter()
            .enumerate()
            .map(|(i, &(start, bound))| Self {
                start_position: start,
                end_position: [0.0, 0.0, 10.0],
                frame_count,
                rotation_policy: if bound == 0.0 {
                    RotationPolicy::Fixed
                } else {
                    RotationPolicy::UniformWithinBound { bound_deg: bound }
                },
                lateral_profile: LateralProfile::Linear,
                z_rate: None,
                seed: base_seed.wrapping_add(i as u64),
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::param(
                "frame_count",
                format!("{} must be at least 2", self.frame_count),
            ));
        }
        for (name, v) in [("start", self.start_position), ("end", self.end_position)] {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::param("trajectory endpoints", format!("{} position {:?} is not finite", name, v)));
            }
        }
        let implied = (self.start_position[2] - self.end_position[2]) / (self.frame_count - 1) as Real;
        if implied <= 0.0 {
            return Err(Error::param(
                "trajectory endpoints",
                format!(
                    "z must strictly decrease; start z {} vs end z {}",
                    self.start_position[2], self.end_position[2]
                ),
            ));
        }
        if let Some(rate) = self.z_rate {
            if (rate - implied).abs() > 1e-9 * implied.max(1.0) {
                return Err(Error::param(
                    "z_rate",
                    format!(
                        "{} disagrees with the rate {} implied by the endpoints and frame count",
                        rate, implied
                    ),
                ));
            }
        }
        if self.lateral_profile == LateralProfile::Projectile
            && (self.end_position[0] != 0.0 || self.end_position[1] != 0.0)
        {
            return Err(Error::param(
                "end_position",
                format!(
                    "projectile profile must end at (0, 0, z), got ({}, {}, {})",
                    self.end_position[0], self.end_position[1], self.end_position[2]
                ),
            ));
        }
        self.rotation_policy.validate()
    }

    /// Implied per-frame z decrease.
    pub fn implied_z_rate(&self) -> Real {
        (self.start_position[2] - self.end_position[2]) / (self.frame_count - 1) as Real
    }
}

/// Expand a spec into one pose per frame. Frame i sits at fraction
/// i / (frame_count - 1) of the way from start to end; z always steps
/// linearly, x and y follow the lateral profile, and the attitude follows
/// the rotation policy with one RNG stream per frame.
pub fn expand_trajectory(spec: &TrajectorySpec) -> Result<Vec<PoseLabel>> {
    spec.validate()?;
    let n = spec.frame_count;
    let attitudes = rotation_sequence(spec.rotation_policy, spec.seed, n)?;
    let mut poses = Vec::with_capacity(n);
    for (i, attitude) in attitudes.into_iter().enumerate() {
        let u = i as Real / (n - 1) as Real;
        let z = spec.start_position[2] + u * (spec.end_position[2] - spec.start_position[2]);
        let lateral = |start: Real, end: Real| match spec.lateral_profile {
            LateralProfile::Linear => start + u * (end - start),
            LateralProfile::Projectile => {
                start * ((1.0 - u) + 4.0 * PROJECTILE_BULGE * u * (1.0 - u))
            }
        };
        let position = [
            lateral(spec.start_position[0], spec.end_position[0]),
            lateral(spec.start_position[1], spec.end_position[1]),
            z,
        ];
        poses.push(PoseLabel { position, attitude });
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_approach_endpoints_are_exact() {
        let spec = TrajectorySpec::straight_approach([0.0, 0.0, 60.0], 2500, 3);
        let poses = expand_trajectory(&spec).unwrap();
        assert_eq!(poses.len(), 2500);
        assert_eq!(poses[0].position, [0.0, 0.0, 60.0]);
        assert_eq!(poses[2499].position, [0.0, 0.0, 10.0]);
        assert_eq!(poses[0].attitude, Quaternion::IDENTITY);
    }

    #[test]
    fn quarter_meter_rate_reaches_ten_meters_in_two_hundred_steps() {
        let spec = TrajectorySpec {
            start_position: [0.0, 0.0, 60.0],
            end_position: [0.0, 0.0, 10.0],
            frame_count: 201,
            rotation_policy: RotationPolicy::Fixed,
            lateral_profile: LateralProfile::Linear,
            z_rate: Some(0.25),
            seed: 0,
        };
        let poses = expand_trajectory(&spec).unwrap();
        assert!((poses[200].position[2] - 10.0).abs() < 1e-12);
        assert!((poses[1].position[2] - 59.75).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_z_rate_is_rejected() {
        let mut spec = TrajectorySpec::straight_approach([0.0, 0.0, 60.0], 201, 0);
        spec.z_rate = Some(0.3);
        assert!(expand_trajectory(&spec).is_err());
    }

    #[test]
    fn same_seed_repeats_and_different_seed_differs() {
        let mut spec = TrajectorySpec::straight_approach([-15.0, -10.0, 60.0], 50, 9);
        spec.rotation_policy = RotationPolicy::UniformWithinBound { bound_deg: 10.0 };
        let a = expand_trajectory(&spec).unwrap();
        let b = expand_trajectory(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed = 10;
        let c = expand_trajectory(&spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rotation_bound_is_respected() {
        let mut spec = TrajectorySpec::straight_approach([0.0, 0.0, 60.0], 200, 4);
        spec.rotation_policy = RotationPolicy::UniformWithinBound { bound_deg: 10.0 };
        let poses = expand_trajectory(&spec).unwrap();
        let mut saw_rotation = false;
        for p in &poses {
            let err = crate::geometry::attitude_error(p.attitude, Quaternion::IDENTITY);
            // Three 10-degree Euler rotations compose to at most ~17.4
            // degrees of total rotation.
            assert!(err <= 17.5, "rotation {} degrees exceeds the bound", err);
            if err > 0.1 {
                saw_rotation = true;
            }
        }
        assert!(saw_rotation);
    }

    #[test]
    fn tumble_advances_by_the_rate_about_one_axis() {
        let mut spec = TrajectorySpec::straight_approach([0.0, 0.0, 25.0], 100, 6);
        spec.rotation_policy = RotationPolicy::Tumble {
            rate_deg_per_frame: 0.7,
        };
        let poses = expand_trajectory(&spec).unwrap();
        assert_eq!(poses[0].attitude, Quaternion::IDENTITY);
        for (i, w) in poses.windows(2).enumerate() {
            let step = crate::geometry::attitude_error(w[1].attitude, w[0].attitude);
            assert!((step - 0.7).abs() < 1e-9, "step {} at frame {}", step, i);
        }
        let total = crate::geometry::attitude_error(poses[99].attitude, poses[0].attitude);
        assert!((total - 0.7 * 99.0).abs() < 1e-9);
        assert_eq!(poses, expand_trajectory(&spec).unwrap());

        spec.rotation_policy = RotationPolicy::Tumble {
            rate_deg_per_frame: 0.0,
        };
        assert!(expand_trajectory(&spec).is_err());
    }

    #[test]
    fn projectile_peaks_inside_and_lands_on_axis() {
        let spec = TrajectorySpec {
            start_position: [25.0, -15.0, 60.0],
            end_position: [0.0, 0.0, 10.0],
            frame_count: 501,
            rotation_policy: RotationPolicy::Fixed,
            lateral_profile: LateralProfile::Projectile,
            z_rate: None,
            seed: 0,
        };
        let poses = expand_trajectory(&spec).unwrap();
        assert_eq!(poses[0].position[0], 25.0);
        assert_eq!(poses[0].position[1], -15.0);
        assert_eq!(poses[500].position[0], 0.0);
        assert_eq!(poses[500].position[1], 0.0);
        let max_x = poses.iter().map(|p| p.position[0]).fold(Real::MIN, Real::max);
        let argmax = poses
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.position[0].partial_cmp(&b.1.position[0]).unwrap())
            .unwrap()
            .0;
        assert!(max_x > 25.0, "arc must rise above the start offset");
        assert!(max_x < 25.0 * 1.05, "overshoot stays modest");
        assert!(argmax > 0 && argmax < 250, "peak lies inside the first half");
        // y mirrors the same shape with negative sign.
        let min_y = poses.iter().map(|p| p.position[1]).fold(Real::MAX, Real::min);
        assert!(min_y < -15.0 && min_y > -15.0 * 1.05);
    }

    #[test]
    fn projectile_requires_axis_end() {
        let spec = TrajectorySpec {
            start_position: [25.0, -15.0, 60.0],
            end_position: [1.0, 0.0, 10.0],
            frame_count: 100,
            rotation_policy: RotationPolicy::Fixed,
            lateral_profile: LateralProfile::Projectile,
            z_rate: None,
            seed: 0,
        };
        assert!(expand_trajectory(&spec).is_err());
    }

    #[test]
    fn standard_sequences_match_the_published_starts() {
        let seqs = TrajectorySpec::standard_sequences(7, 2500);
        assert_eq!(seqs.len(), 13);
        assert_eq!(seqs[0].start_position, [0.0, 0.0, 60.0]);
        assert_eq!(seqs[1].start_position, [-15.0, -25.0, 60.0]);
        assert_eq!(seqs[2].start_position, [-15.0, 25.0, 60.0]);
        assert_eq!(seqs[3].start_position, [15.0, 25.0, 60.0]);
        assert_eq!(seqs[4].start_position, [15.0, -25.0, 60.0]);
        for (i, expected) in [
            [-15.0, -10.0, 60.0],
            [-15.0, 10.0, 60.0],
            [15.0, 10.0, 60.0],
            [15.0, -10.0, 60.0],
        ]
        .iter()
        .enumerate()
        {
            assert_eq!(seqs[5 + i].start_position, *expected);
            assert_eq!(seqs[9 + i].start_position, *expected);
            assert_eq!(
                seqs[5 + i].rotation_policy,
                RotationPolicy::UniformWithinBound { bound_deg: 10.0 }
            );
        }
        for i in 0..5 {
            assert_eq!(seqs[i].rotation_policy, RotationPolicy::Fixed);
        }
        for s in &seqs {
            assert_eq!(s.end_position, [0.0, 0.0, 10.0]);
            assert_eq!(s.frame_count, 2500);
        }
        // Repeated starts still get distinct rotation streams.
        let a = expand_trajectory(&seqs[5]).unwrap();
        let b = expand_trajectory(&seqs[9]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn z_is_strictly_monotone() {
        let spec = TrajectorySpec::straight_approach([15.0, 25.0, 60.0], 777, 0);
        let poses = expand_trajectory(&spec).unwrap();
        for w in poses.windows(2) {
            assert!(w[1].position[2] < w[0].position[2]);
        }
    }
}
