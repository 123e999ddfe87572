use relnav_core::estimator::{train, Estimator, EstimatorConfig, TrainConfig};
use relnav_core::geometry::CameraIntrinsics;
use relnav_core::scenegen::{
    expand_trajectory, render_frame, LateralProfile, RotationPolicy, SatelliteModel,
    TrajectorySpec,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let dropout: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let blocks0: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let start_z: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(60.0);
    let bound_deg: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let base_lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let spec = TrajectorySpec {
        start_position: [-start_z / 4.0, -start_z / 6.0, start_z],
        end_position: [0.0, 0.0, 10.0],
        frame_count: 200,
        rotation_policy: if bound_deg < 0.0 {
            RotationPolicy::Tumble {
                rate_deg_per_frame: -bound_deg,
            }
        } else {
            RotationPolicy::UniformWithinBound { bound_deg }
        },
        lateral_profile: LateralProfile::Linear,
        z_rate: None,
        seed: 7,
    };
    let poses = expand_trajectory(&spec).unwrap();
    let camera = CameraIntrinsics::new(100.0, 75.0, 60.0, 45.0).unwrap();
    let model = SatelliteModel::mock_satellite();
    let t0 = std::time::Instant::now();
    let frames: Vec<_> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut f = render_frame(&model, p, &camera, [0.0, 0.0, -1.0], 90, 120).unwrap();
            f.frame_index = i;
            f
        })
        .collect();
    println!("rendered {} frames in {:?}", frames.len(), t0.elapsed());

    let mut config = EstimatorConfig::desk_default();
    config.dropout_rate = dropout;
    config.blocks_per_stage[0] = blocks0;
    let mut est = Estimator::build(config, 42).unwrap();
    let initial = est.evaluate(&frames).unwrap();
    println!(
        "initial: pos {:.4} m, att {:.4} deg",
        initial.mean_position_error, initial.mean_attitude_error_deg
    );

    let chunk: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(25);
    let indices: Vec<usize> = (0..frames.len()).collect();
    let t1 = std::time::Instant::now();
    let mut done = 0;
    while done < epochs {
        let mut tc = TrainConfig::desk_overfit(11 + done as u64);
        tc.epochs = chunk.min(epochs - done);
        tc.base_lr = base_lr;
        tc.max_lr = base_lr * 10.0;
        let history = train(&mut est, &frames, &indices, &tc).unwrap();
        done += tc.epochs;
        let last = history.epochs.last().unwrap();
        let m = &history.final_metrics;
        println!(
            "epoch {:3}  loss {:10.4}  sp {:+.3} sr {:+.3}  pos {:.4} m ({:.2}%)  att {:.4} deg  [{:.1} s]",
            done,
            last.mean_loss,
            last.sigma_p,
            last.sigma_r,
            m.mean_position_error,
            100.0 * m.mean_position_error / initial.mean_position_error,
            m.mean_attitude_error_deg,
            t1.elapsed().as_secs_f64()
        );
    }
    let dt = t1.elapsed();
    println!(
        "trained {} epochs in {:?} ({:.2} s/epoch)",
        epochs,
        dt,
        dt.as_secs_f64() / epochs as f64
    );
}
