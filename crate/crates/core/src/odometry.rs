//! Teach-pass odometry: scan-to-submap registration with a constant-velocity
//! motion prior, producing keyframes for the map.

use std::collections::VecDeque;

use crate::config::PipelineConfig;
use crate::geometry::{Pose2, Velocity};
use crate::preprocessing::{cloud_from_detections, detect, preprocess_with, PolarScan};
use crate::registration::{register, RegistrationError, RegistrationResult};
use crate::surface_points::{compute_surface_points, transform_surface_points, SurfacePointSet};
use crate::trajectory::TimedPose;

/// A stored scan summary. Surface points live in the keyframe's own sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub pose: Pose2,
    pub surface_points: SurfacePointSet,
    pub timestamp: f64,
}

impl Keyframe {
    /// Surface points re-anchored in the map frame by the keyframe pose.
    pub fn map_frame_points(&self) -> SurfacePointSet {
        transform_surface_points(&self.surface_points, &self.pose)
    }
}

/// Pose of `last_pose` extrapolated to time `t` under a constant body twist.
pub fn extrapolate(last_pose: &Pose2, velocity: &Velocity, dt: f64) -> Pose2 {
    if velocity.is_zero() || dt == 0.0 {
        return *last_pose;
    }
    last_pose.compose(&velocity.integrate(dt))
}

/// Extra deskew-and-register rounds allowed per scan.
pub const DESKEW_REFINEMENTS: usize = 3;

/// Passes that re-deskew the first keyframe once the second scan gives a velocity.
pub const FIRST_KEYFRAME_REFINEMENTS: usize = 8;
/// Deskew velocities closer than this over one sweep count as equal (m, rad).
const DESKEW_TOL: (f64, f64) = (2e-3, 2e-4);

/// A scan registered with a deskew velocity consistent with its own result.
#[derive(Debug, Clone)]
pub struct DeskewedRegistration {
    /// Surface points of the scan deskewed with `velocity`.
    pub points: SurfacePointSet,
    pub velocity: Velocity,
    pub result: Result<RegistrationResult, RegistrationError>,
}

/// Registers `scan` and, while the motion from `previous` to the result
/// disagrees with the velocity the scan was deskewed with, deskews again with
/// that motion and re-registers from the last result.
///
/// Deskewing with the previous increment alone lets a velocity error shift
/// the next pose by half its effect over a sweep, which feeds straight back
/// into the next velocity. Solving for a consistent velocity damps this.
pub fn register_deskewed(
    scan: &PolarScan,
    targets: &[SurfacePointSet],
    predicted: &Pose2,
    velocity: Velocity,
    previous: Option<(f64, Pose2)>,
    cfg: &PipelineConfig,
    parallel: bool,
) -> DeskewedRegistration {
    let detections = detect(scan, cfg, parallel);
    let surface = |v: &Velocity| {
        let cloud = cloud_from_detections(&detections, scan, v, cfg);
        compute_surface_points(&cloud, cfg.grid_res, cfg.min_points)
    };
    let mut points = surface(&velocity);
    let mut out = DeskewedRegistration {
        result: register(&points, targets, predicted, cfg),
        points: SurfacePointSet::default(),
        velocity,
    };
    let sweep = scan.sweep_duration();
    for _ in 0..DESKEW_REFINEMENTS {
        let (Ok(r), Some((t0, p0))) = (&out.result, previous) else {
            break;
        };
        let dt = scan.scan_time - t0;
        if dt <= 0.0 {
            break;
        }
        let v = Velocity::from_increment(&p0, &r.pose, dt);
        if velocity_settled(&v, &out.velocity, sweep) {
            break;
        }
        let refined = surface(&v);
        match register(&refined, targets, &r.pose, cfg) {
            Ok(next) => {
                points = refined;
                out.velocity = v;
                out.result = Ok(next);
            }
            Err(_) => break,
        }
    }
    out.points = points;
    out
}

/// True when deskewing with `a` instead of `b` moves points by less than the
/// refinement tolerance over a sweep.
pub fn velocity_settled(a: &Velocity, b: &Velocity, sweep: f64) -> bool {
    let dv = (a.vx - b.vx).hypot(a.vy - b.vy) * sweep;
    let dw = (a.omega - b.omega).abs() * sweep;
    dv < DESKEW_TOL.0 && dw < DESKEW_TOL.1
}

/// True when `current` has moved more than `kf_dist` or turned more than `kf_rot` from `last_kf`.
pub fn keyframe_trigger(current: &Pose2, last_kf: &Pose2, cfg: &PipelineConfig) -> bool {
    let (d_trans, d_rot) = last_kf.log_delta(current);
    d_trans > cfg.kf_dist || d_rot > cfg.kf_rot
}

/// Preprocessing plus surface-point extraction, in the scan's own frame.
pub fn scan_surface_points(scan: &PolarScan, v: &Velocity, cfg: &PipelineConfig, parallel: bool) -> SurfacePointSet {
    let cloud = preprocess_with(scan, v, cfg, parallel);
    compute_surface_points(&cloud, cfg.grid_res, cfg.min_points)
}

/// What happened to one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub time: f64,
    pub pose: Pose2,
    pub n_surface_points: usize,
    pub registration: Option<RegistrationResult>,
    /// Set when registration failed and the predicted pose was adopted.
    pub failure: Option<RegistrationError>,
    pub new_keyframe: Option<usize>,
}

impl StepReport {
    pub fn iterations(&self) -> usize {
        self.registration.as_ref().map_or(0, |r| r.iterations)
    }

    pub fn n_correspondences(&self) -> usize {
        self.registration.as_ref().map_or(0, |r| r.n_correspondences)
    }

    pub fn converged(&self) -> bool {
        self.registration.as_ref().is_some_and(|r| r.converged)
    }
}

#[derive(Debug, Clone, Default)]
pub struct OdometryState {
    pub last_pose: Pose2,
    pub last_time: Option<f64>,
    pub velocity: Velocity,
    /// The `s_o` most recent keyframes, oldest first.
    pub keyframes: VecDeque<Keyframe>,
    /// Map-frame copies of `keyframes`, same order.
    submap: VecDeque<SurfacePointSet>,
    /// Every keyframe created so far.
    pub all_keyframes: Vec<Keyframe>,
    pub frame_count: usize,
    pub parallel: bool,
    /// First keyframe's scan, kept until a velocity is known to deskew it.
    first_scan: Option<PolarScan>,
}

impl OdometryState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn predict_pose(&self, t: f64) -> Pose2 {
        match self.last_time {
            Some(last) => extrapolate(&self.last_pose, &self.velocity, t - last),
            None => self.last_pose,
        }
    }

    fn push_keyframe(&mut self, pose: Pose2, points: SurfacePointSet, timestamp: f64, s_o: usize) -> usize {
        let id = self.all_keyframes.len();
        let kf = Keyframe {
            id,
            pose,
            surface_points: points,
            timestamp,
        };
        self.submap.push_back(kf.map_frame_points());
        self.keyframes.push_back(kf.clone());
        self.all_keyframes.push(kf);
        while self.keyframes.len() > s_o {
            self.keyframes.pop_front();
            self.submap.pop_front();
        }
        id
    }

    /// Rebuilds the first keyframe, deskewed before any velocity was known.
    fn redeskew_first_keyframe(&mut self, first: &PolarScan, v: &Velocity, cfg: &PipelineConfig) {
        if self.all_keyframes.len() != 1 || self.keyframes.len() != 1 {
            return;
        }
        let points = scan_surface_points(first, v, cfg, self.parallel);
        if points.is_empty() {
            return;
        }
        self.keyframes[0].surface_points = points.clone();
        self.all_keyframes[0].surface_points = points;
        self.submap[0] = self.keyframes[0].map_frame_points();
    }

    /// Processes one scan and returns the adopted pose with diagnostics.
    pub fn step(&mut self, scan: &PolarScan, cfg: &PipelineConfig) -> StepReport {
        let t = scan.scan_time;
        let predicted = self.predict_pose(t);
        let previous = self.last_time.map(|lt| (lt, self.last_pose));
        let mut report = StepReport {
            time: t,
            pose: predicted,
            n_surface_points: 0,
            registration: None,
            failure: None,
            new_keyframe: None,
        };

        let (pose, points) = if self.keyframes.is_empty() {
            let points = scan_surface_points(scan, &self.velocity, cfg, self.parallel);
            if !points.is_empty() {
                report.new_keyframe = Some(self.push_keyframe(predicted, points.clone(), t, cfg.s_o));
                self.first_scan = Some(scan.clone());
            }
            (predicted, points)
        } else {
            let targets: Vec<SurfacePointSet> = self.submap.iter().cloned().collect();
            let mut reg = register_deskewed(scan, &targets, &predicted, self.velocity, previous, cfg, self.parallel);
            if let (Some(first), Some((t0, p0))) = (self.first_scan.take(), previous) {
                // the first keyframe can be deskewed now; both scans are
                // refined until they agree on the velocity
                let mut used = Velocity::zero();
                for _ in 0..FIRST_KEYFRAME_REFINEMENTS {
                    let Ok(r) = &reg.result else { break };
                    if t <= t0 {
                        break;
                    }
                    let v = Velocity::from_increment(&p0, &r.pose, t - t0);
                    if velocity_settled(&v, &used, scan.sweep_duration()) {
                        break;
                    }
                    self.redeskew_first_keyframe(&first, &v, cfg);
                    let targets: Vec<SurfacePointSet> = self.submap.iter().cloned().collect();
                    let start = r.pose;
                    reg = register_deskewed(scan, &targets, &start, v, previous, cfg, self.parallel);
                    used = v;
                }
            }
            match reg.result {
                Ok(result) => {
                    let pose = result.pose;
                    report.registration = Some(result);
                    (pose, reg.points)
                }
                Err(e) => {
                    log::warn!("frame {}: registration failed ({e}); keeping prediction", self.frame_count);
                    report.failure = Some(e);
                    (predicted, reg.points)
                }
            }
        };
        report.n_surface_points = points.len();

        if let Some((t0, p0)) = previous {
            if t > t0 {
                self.velocity = Velocity::from_increment(&p0, &pose, t - t0);
            }
        }
        if report.new_keyframe.is_none() && !points.is_empty() {
            let last_kf = self.keyframes.back().map(|k| k.pose);
            if last_kf.is_some_and(|kf| keyframe_trigger(&pose, &kf, cfg)) {
                report.new_keyframe = Some(self.push_keyframe(pose, points, t, cfg.s_o));
            }
        }
        self.last_pose = pose;
        self.last_time = Some(t);
        self.frame_count += 1;
        report.pose = pose;
        report
    }
}

/// Runs odometry over a whole sequence.
pub fn run_odometry(scans: &[PolarScan], cfg: &PipelineConfig) -> (OdometryState, Vec<StepReport>) {
    let mut state = OdometryState::new();
    let reports = scans.iter().map(|s| state.step(s, cfg)).collect();
    (state, reports)
}

pub fn reports_to_trajectory(reports: &[StepReport]) -> Vec<TimedPose> {
    reports.iter().map(|r| TimedPose::new(r.time, r.pose)).collect()
}
