mod common;

use common::{anchored, simulate};
use radar_tr::odometry::{reports_to_trajectory, OdometryState};
use radar_tr::scenarios;
use radar_tr::sim::{simulate_sequence, SimConfig};
use radar_tr::{wrap_angle, Pose2, TimedPose};

fn quiet(sim: &SimConfig) -> SimConfig {
    SimConfig {
        speckle_rate: 0.0,
        encoder_jitter: 0.0,
        range_noise_std: 0.0,
        ..sim.clone()
    }
}

#[test]
fn corridor_run_stays_within_a_meter() {
    let sc = scenarios::corridor();
    let sim = simulate(&sc);
    let (_, est) = common::teach_trajectory(&sim.teach_scans, &sc.pipeline);
    let gt = anchored(&sim.teach_gt, &sim.teach_gt[0]);
    let last = est.last().unwrap().pose;
    let truth = gt.last().unwrap().pose;
    let err = (last.translation() - truth.translation()).norm();
    let driven = radar_tr::trajectory::arc_lengths(&gt).last().copied().unwrap();
    assert!(driven > 95.0);
    assert!(err < 1.0 && err < 0.01 * driven, "final error {err:.3} m over {driven:.1} m");
}

#[test]
fn stationary_scans_stay_at_the_origin() {
    let sc = scenarios::corridor();
    let at = sc.teach[10].pose;
    let still: Vec<TimedPose> = (0..10).map(|i| TimedPose::new(0.25 * i as f64, at)).collect();
    let (scans, _) = simulate_sequence(&sc.world, &still, &quiet(&sc.sim));
    let mut odo = OdometryState::new();
    for scan in &scans {
        let report = odo.step(scan, &sc.pipeline);
        let p = report.pose;
        assert!(p.x.abs() < 1e-3 && p.y.abs() < 1e-3, "{p:?}");
        assert!(p.theta.abs() < 0.01_f64.to_radians(), "{p:?}");
    }
    assert_eq!(odo.all_keyframes.len(), 1);
}

#[test]
fn velocity_settles_on_the_true_twist() {
    let sc = scenarios::corridor();
    let sim = simulate(&sc);
    // constant 10 m/s straight ahead
    let truth = 10.0;
    let mut odo = OdometryState::new();
    for (i, scan) in sim.teach_scans.iter().enumerate() {
        odo.step(scan, &sc.pipeline);
        if i >= 5 {
            let v = odo.velocity;
            let err = ((v.vx - truth).powi(2) + v.vy.powi(2)).sqrt();
            assert!(err < 0.05 * truth, "frame {i}: {v:?}");
            assert!(v.omega.abs() < 0.05, "frame {i}: {v:?}");
        }
    }
}

#[test]
fn submap_and_keyframe_invariants_on_the_loop() {
    let sc = scenarios::loop_200m();
    let sim = simulate(&sc);
    let cfg = &sc.pipeline;
    let mut odo = OdometryState::new();
    let mut reports = Vec::new();
    for scan in &sim.teach_scans {
        let before: Vec<usize> = odo.keyframes.iter().map(|k| k.id).collect();
        let report = odo.step(scan, cfg);
        let after: Vec<usize> = odo.keyframes.iter().map(|k| k.id).collect();
        assert!(after.len() <= cfg.s_o);
        if let Some(id) = report.new_keyframe {
            // oldest evicted first, newest appended
            let mut expected = before.clone();
            expected.push(id);
            let drop = expected.len().saturating_sub(cfg.s_o);
            assert_eq!(after, expected[drop..]);
        } else {
            assert_eq!(after, before);
        }
        reports.push(report);
    }
    let kfs = &odo.all_keyframes;
    assert!(kfs.len() > 50, "{} keyframes", kfs.len());
    for w in kfs.windows(2) {
        let (d, r) = w[0].pose.log_delta(&w[1].pose);
        assert!(d > cfg.kf_dist || r > cfg.kf_rot, "keyframes {} and {}: {d} m, {r} rad", w[0].id, w[1].id);
    }
    assert_eq!(reports_to_trajectory(&reports).len(), sim.teach_scans.len());
}

#[test]
fn first_scan_defines_the_map_frame() {
    let sc = scenarios::corridor();
    let sim = simulate(&sc);
    let mut odo = OdometryState::new();
    let report = odo.step(&sim.teach_scans[0], &sc.pipeline);
    assert_eq!(report.pose, Pose2::identity());
    assert_eq!(report.new_keyframe, Some(0));
    assert_eq!(wrap_angle(odo.all_keyframes[0].pose.theta), 0.0);
}
