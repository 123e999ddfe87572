//! Motion-capture ingestion: parse rigid-body tracks and assign each camera
//! frame the nearest-in-time record.

use std::io::Read;

use crate::error::{Error, Result};
use crate::geometry::{quat_multiply, PoseLabel, Quaternion, Vec3};
use crate::numerics::Real;

/// One rigid body observed at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidBodySample {
    pub position: Vec3,
    pub attitude: Quaternion,
}

/// Synchronized camera and target poses at one capture instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MocapRecord {
    pub t: Real,
    pub camera: RigidBodySample,
    pub target: RigidBodySample,
}

/// Labels matched to frame timestamps plus the worst time gap encountered.
#[derive(Clone, Debug)]
pub struct MocapMatch {
    pub labels: Vec<PoseLabel>,
    pub max_gap: Real,
}

/// Parse a delimited export with columns
/// `t, rigid_body_id, x, y, z, qw, qx, qy, qz`. Rows for the two requested
/// ids are paired by timestamp; rows for other bodies are ignored.
pub fn parse_mocap_csv<R: Read>(
    reader: R,
    camera_id: &str,
    target_id: &str,
) -> Result<Vec<MocapRecord>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut pending: Vec<(Real, Option<RigidBodySample>, Option<RigidBodySample>)> = Vec::new();
    for row in csv_reader.records() {
        let row = row.map_err(|e| Error::Format { what: "mocap csv", detail: e.to_string() })?;
        if row.len() != 9 {
            return Err(Error::Format {
                what: "mocap csv",
                detail: format!("expected 9 columns, got {}", row.len()),
            });
        }
        let num = |i: usize| -> Result<Real> {
            row[i].parse::<Real>().map_err(|_| Error::Format {
                what: "mocap csv",
                detail: format!("column {} value {:?} is not a number", i, &row[i]),
            })
        };
        let id = &row[1];
        if id != camera_id && id != target_id {
            continue;
        }
        let t = num(0)?;
        let sample = RigidBodySample {
            position: [num(2)?, num(3)?, num(4)?],
            attitude: Quaternion::new(num(5)?, num(6)?, num(7)?, num(8)?)
                .normalized()
                .map_err(|e| Error::Format { what: "mocap csv", detail: e.to_string() })?,
        };
        let slot = match pending.iter_mut().rev().find(|(pt, _, _)| *pt == t) {
            Some(slot) => slot,
            None => {
                pending.push((t, None, None));
                pending.last_mut().expect("just pushed")
            }
        };
        if id == camera_id {
            slot.1 = Some(sample);
        } else {
            slot.2 = Some(sample);
        }
    }
    let mut records: Vec<MocapRecord> = pending
        .into_iter()
        .filter_map(|(t, cam, tgt)| {
            // Instants where only one body was tracked carry no relative
            // pose and are dropped.
            match (cam, tgt) {
                (Some(camera), Some(target)) => Some(MocapRecord { t, camera, target }),
                _ => None,
            }
        })
        .collect();
    records.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite timestamps"));
    Ok(records)
}

/// Match each frame timestamp to its nearest mocap record. The relative
/// position is the camera position minus the target position, and the
/// relative attitude is the target attitude expressed in the camera body
/// frame. `mocap_rate_hz` bounds the acceptable gap: a frame farther than
/// two mocap periods from every record is an error.
pub fn match_mocap(
    frame_timestamps: &[Real],
    records: &[MocapRecord],
    mocap_rate_hz: Real,
) -> Result<MocapMatch> {
    if records.is_empty() {
        return Err(Error::Empty("mocap records"));
    }
    if mocap_rate_hz <= 0.0 {
        return Err(Error::param(
            "mocap_rate_hz",
            format!("{} must be positive", mocap_rate_hz),
        ));
    }
    let limit = 2.0 / mocap_rate_hz;
    let mut labels = Vec::with_capacity(frame_timestamps.len());
    let mut max_gap: Real = 0.0;
    for &t in frame_timestamps {
        let idx = match records.binary_search_by(|r| r.t.partial_cmp(&t).expect("finite")) {
            Ok(i) => i,
            Err(i) => {
                // Nearest of the two neighbors around the insertion point.
                if i == 0 {
                    0
                } else if i == records.len() {
                    records.len() - 1
                } else if (records[i].t - t).abs() < (t - records[i - 1].t).abs() {
                    i
                } else {
                    i - 1
                }
            }
        };
        let record = &records[idx];
        let gap = (record.t - t).abs();
        if gap > limit {
            return Err(Error::UnmatchedFrame {
                frame_t: t as f64,
                gap: gap as f64,
                limit: limit as f64,
            });
        }
        max_gap = max_gap.max(gap);
        labels.push(relative_pose(record)?);
    }
    Ok(MocapMatch { labels, max_gap })
}

fn relative_pose(record: &MocapRecord) -> Result<PoseLabel> {
    let position = [
        record.camera.position[0] - record.target.position[0],
        record.camera.position[1] - record.target.position[1],
        record.camera.position[2] - record.target.position[2],
    ];
    let attitude = quat_multiply(record.camera.attitude.conjugate(), record.target.attitude)?;
    Ok(PoseLabel { position, attitude })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_csv() -> String {
        let mut s = String::from("t,id,x,y,z,qw,qx,qy,qz\n");
        for i in 0..240 {
            let t = i as f64 / 120.0;
            s.push_str(&format!("{},cam,1,2,3,1,0,0,0\n", t));
            s.push_str(&format!("{},sat,0,0,1,1,0,0,0\n", t));
            s.push_str(&format!("{},other,9,9,9,1,0,0,0\n", t));
        }
        s
    }

    #[test]
    fn parse_pairs_bodies_by_timestamp_and_skips_others() {
        let records = parse_mocap_csv(simple_csv().as_bytes(), "cam", "sat").unwrap();
        assert_eq!(records.len(), 240);
        assert_eq!(records[0].camera.position, [1.0, 2.0, 3.0]);
        assert_eq!(records[0].target.position, [0.0, 0.0, 1.0]);
        assert!((records[1].t - 1.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn relative_position_is_camera_minus_target() {
        let records = parse_mocap_csv(simple_csv().as_bytes(), "cam", "sat").unwrap();
        let matched = match_mocap(&[0.5], &records, 120.0).unwrap();
        assert_eq!(matched.labels[0].position, [1.0, 2.0, 2.0]);
        assert_eq!(matched.labels[0].attitude, Quaternion::IDENTITY);
    }

    #[test]
    fn frames_match_within_half_mocap_period() {
        let records = parse_mocap_csv(simple_csv().as_bytes(), "cam", "sat").unwrap();
        // 30 fps frames against a 120 Hz track.
        let stamps: Vec<Real> = (0..30).map(|i| 0.013 + i as Real / 30.0).collect();
        let matched = match_mocap(&stamps, &records, 120.0).unwrap();
        assert_eq!(matched.labels.len(), 30);
        assert!(matched.max_gap <= 0.5 / 120.0 + 1e-12);
    }

    #[test]
    fn oversized_gap_is_an_unmatched_frame_error() {
        let records = parse_mocap_csv(simple_csv().as_bytes(), "cam", "sat").unwrap();
        let err = match_mocap(&[5.0], &records, 120.0).unwrap_err();
        match err {
            Error::UnmatchedFrame { frame_t, gap, limit } => {
                assert_eq!(frame_t, 5.0);
                assert!(gap > limit);
                assert!((limit - 2.0 / 120.0).abs() < 1e-12);
            }
            other => panic!("expected unmatched frame, got {:?}", other),
        }
    }

    #[test]
    fn empty_record_list_is_an_error() {
        assert!(matches!(
            match_mocap(&[0.0], &[], 120.0).unwrap_err(),
            Error::Empty(_)
        ));
    }

    #[test]
    fn unpaired_instants_are_dropped() {
        let csv = "t,id,x,y,z,qw,qx,qy,qz\n\
                   0.0,cam,1,0,0,1,0,0,0\n\
                   0.0,sat,0,0,0,1,0,0,0\n\
                   0.5,cam,2,0,0,1,0,0,0\n";
        let records = parse_mocap_csv(csv.as_bytes(), "cam", "sat").unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].t, 0.0);
    }

    #[test]
    fn relative_attitude_composes_camera_and_target() {
        let half_turn = Quaternion::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::PI / 2.0)
            .unwrap();
        let csv = format!(
            "t,id,x,y,z,qw,qx,qy,qz\n\
             0.0,cam,0,0,0,{},{},{},{}\n\
             0.0,sat,0,0,0,1,0,0,0\n",
            half_turn.w, half_turn.x, half_turn.y, half_turn.z
        );
        let records = parse_mocap_csv(csv.as_bytes(), "cam", "sat").unwrap();
        let matched = match_mocap(&[0.0], &records, 120.0).unwrap();
        let expected = half_turn.conjugate();
        let got = matched.labels[0].attitude;
        assert!((got.w - expected.w).abs() < 1e-12);
        assert!((got.z - expected.z).abs() < 1e-12);
    }
}
