//! Repeat-pass localization against a teach graph.
//!
//! Each scan is registered jointly against the teach nodes around the closest
//! node and a short window of recent repeat-pass keyframes. Registration runs
//! in the frame of the closest node, so only relative node poses matter.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::geometry::{wrap_angle, Pose2, Velocity};
use crate::map_store::TeachGraph;
use crate::odometry::{extrapolate, keyframe_trigger, register_deskewed, velocity_settled};
use crate::preprocessing::PolarScan;
use crate::registration::{RegistrationError, RegistrationResult};
use crate::surface_points::{transform_surface_points, SurfacePointSet};
use crate::trajectory::{interpolate_pose, read_numeric_csv, CsvError, TimedPose};

/// Pose error expressed in a teach node's frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationError {
    pub longitudinal: f64,
    pub lateral: f64,
    /// Radians.
    pub heading: f64,
}

impl LocalizationError {
    pub fn new(longitudinal: f64, lateral: f64, heading: f64) -> Self {
        Self {
            longitudinal,
            lateral,
            heading,
        }
    }

    pub fn translation(&self) -> f64 {
        self.longitudinal.hypot(self.lateral)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InitError {
    #[error("teach graph is empty")]
    EmptyGraph,
    #[error("initial pose is not finite")]
    NonFinitePose,
}

/// Node whose translation is nearest to `pose`; ties go to the lower id.
pub fn closest_node(graph: &TeachGraph, pose: &Pose2) -> usize {
    assert!(!graph.is_empty(), "closest_node on an empty graph");
    let mut best = (f64::INFINITY, 0);
    for node in &graph.nodes {
        let d = (node.pose.x - pose.x).powi(2) + (node.pose.y - pose.y).powi(2);
        if d < best.0 {
            best = (d, node.id);
        }
    }
    best.1
}

/// Ids of `center` and up to `(s_m - 1) / 2` neighbours on each side.
pub fn select_map_frames(graph: &TeachGraph, center: usize, s_m: usize) -> Vec<usize> {
    let half = s_m.saturating_sub(1) / 2;
    let lo = center.saturating_sub(half);
    let hi = (center + half).min(graph.len().saturating_sub(1));
    (lo..=hi).collect()
}

/// `node_pose⁻¹ ⊕ est`, split into along-track, cross-track and heading parts.
pub fn relative_error(est: &Pose2, node_pose: &Pose2) -> LocalizationError {
    let r = node_pose.between(est);
    LocalizationError::new(r.x, r.y, r.theta)
}

pub fn localization_error(est: &Pose2, node: &crate::odometry::Keyframe) -> LocalizationError {
    relative_error(est, &node.pose)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub time: f64,
    pub pose: Pose2,
    pub node: usize,
    /// Estimate relative to the closest node.
    pub error: LocalizationError,
    pub n_correspondences: usize,
    pub iterations: usize,
    pub converged: bool,
    pub registration: Option<RegistrationResult>,
    pub failure: Option<RegistrationError>,
}

/// Repeat-pass keyframe; `points` are in its own sensor frame.
struct LiveFrame {
    pose: Pose2,
    points: SurfacePointSet,
}

pub struct LocalizationState<'g> {
    graph: &'g TeachGraph,
    live_frames: VecDeque<LiveFrame>,
    pub current_node: usize,
    pub pose: Pose2,
    pub velocity: Velocity,
    pub last_time: f64,
    pub frame_count: usize,
    pub parallel: bool,
}

/// Starts localization at an externally supplied pose with zero velocity.
pub fn initialize(graph: &TeachGraph, first_pose: Pose2, t: f64) -> Result<LocalizationState<'_>, InitError> {
    if graph.is_empty() {
        return Err(InitError::EmptyGraph);
    }
    if !first_pose.is_finite() {
        return Err(InitError::NonFinitePose);
    }
    Ok(LocalizationState {
        graph,
        live_frames: VecDeque::new(),
        current_node: closest_node(graph, &first_pose),
        pose: first_pose,
        velocity: Velocity::zero(),
        last_time: t,
        frame_count: 0,
        parallel: false,
    })
}

impl LocalizationState<'_> {
    pub fn graph(&self) -> &TeachGraph {
        self.graph
    }

    pub fn live_window_len(&self) -> usize {
        self.live_frames.len()
    }

    /// Poses of the live window, oldest first.
    pub fn live_window_poses(&self) -> Vec<Pose2> {
        self.live_frames.iter().map(|f| f.pose).collect()
    }

    pub fn predict_pose(&self, t: f64) -> Pose2 {
        extrapolate(&self.pose, &self.velocity, t - self.last_time)
    }

    pub fn step(&mut self, scan: &PolarScan, cfg: &PipelineConfig) -> FrameRecord {
        let t = scan.scan_time;
        let predicted = self.predict_pose(t);
        let center = closest_node(self.graph, &predicted);
        let anchor = self.graph.nodes[center].pose;
        let mut targets: Vec<SurfacePointSet> = select_map_frames(self.graph, center, cfg.s_m)
            .into_iter()
            .map(|id| {
                let node = &self.graph.nodes[id];
                transform_surface_points(&node.surface_points, &anchor.between(&node.pose))
            })
            .collect();
        targets.extend(
            self.live_frames
                .iter()
                .map(|f| transform_surface_points(&f.points, &anchor.between(&f.pose))),
        );

        let previous = Some((self.last_time, anchor.between(&self.pose)));
        let reg = register_deskewed(
            scan,
            &targets,
            &anchor.between(&predicted),
            self.velocity,
            previous,
            cfg,
            self.parallel,
        );
        let points = reg.points;
        let (pose, registration, failure) = match reg.result {
            Ok(mut r) => {
                r.pose = anchor.compose(&r.pose);
                (r.pose, Some(r), None)
            }
            Err(e) => {
                log::warn!("frame {}: registration failed ({e}); keeping prediction", self.frame_count);
                (predicted, None, Some(e))
            }
        };

        let dt = t - self.last_time;
        if dt > 0.0 {
            self.velocity = Velocity::from_increment(&self.pose, &pose, dt);
        }
        self.pose = pose;
        self.last_time = t;
        self.frame_count += 1;
        self.current_node = closest_node(self.graph, &pose);

        if cfg.s_l > 0 && !points.is_empty() {
            let enter = match self.live_frames.back() {
                None => true,
                Some(last) => keyframe_trigger(&pose, &last.pose, cfg),
            };
            if enter {
                self.live_frames.push_back(LiveFrame {
                    pose,
                    points,
                });
                while self.live_frames.len() > cfg.s_l {
                    self.live_frames.pop_front();
                }
            }
        }

        FrameRecord {
            time: t,
            pose,
            node: self.current_node,
            error: relative_error(&pose, &self.graph.nodes[self.current_node].pose),
            n_correspondences: registration.as_ref().map_or(0, |r| r.n_correspondences),
            iterations: registration.as_ref().map_or(0, |r| r.iterations),
            converged: registration.as_ref().is_some_and(|r| r.converged),
            registration,
            failure,
        }
    }
}

/// Frames run to estimate the starting velocity before the real pass.
pub const BOOTSTRAP_FRAMES: usize = 2;
/// Most passes over the bootstrap frames.
pub const BOOTSTRAP_ROUNDS: usize = 6;

/// Localizes a whole sequence from `first_pose`, taken at the first scan's time.
///
/// The first scans would otherwise be deskewed with zero velocity. Short
/// throwaway passes over them, each seeded with the velocity the previous one
/// ended on, provide the velocity the real pass starts with.
pub fn run_localization(
    graph: &TeachGraph,
    scans: &[PolarScan],
    first_pose: Pose2,
    cfg: &PipelineConfig,
) -> Result<Vec<FrameRecord>, InitError> {
    let t0 = scans.first().map_or(0.0, |s| s.scan_time);
    let mut state = initialize(graph, first_pose, t0)?;
    if scans.len() > 1 {
        state.velocity = bootstrap_velocity(graph, scans, first_pose, cfg)?;
    }
    Ok(scans.iter().map(|s| state.step(s, cfg)).collect())
}

/// Starting velocity for a pass over `scans`, from repeated throwaway passes over its first frames.
pub fn bootstrap_velocity(
    graph: &TeachGraph,
    scans: &[PolarScan],
    first_pose: Pose2,
    cfg: &PipelineConfig,
) -> Result<Velocity, InitError> {
    let t0 = scans[0].scan_time;
    let sweep = scans[0].sweep_duration();
    let mut velocity = Velocity::zero();
    for _ in 0..BOOTSTRAP_ROUNDS {
        let mut probe = initialize(graph, first_pose, t0)?;
        probe.velocity = velocity;
        for s in scans.iter().take(BOOTSTRAP_FRAMES) {
            probe.step(s, cfg);
        }
        if !probe.velocity.is_finite() {
            break;
        }
        let settled = velocity_settled(&probe.velocity, &velocity, sweep);
        velocity = probe.velocity;
        if settled {
            break;
        }
    }
    Ok(velocity)
}

/// Error of each frame against ground truth.
///
/// The estimate's offset from its node is compared with the true offset
/// between the repeat sensor and the teach sensor at the node's timestamp, so
/// teach-pass drift does not count against the repeat pass.
pub fn ground_truth_errors(
    records: &[FrameRecord],
    graph: &TeachGraph,
    teach_gt: &[TimedPose],
    repeat_gt: &[TimedPose],
) -> Vec<LocalizationError> {
    records
        .iter()
        .map(|r| {
            let node = &graph.nodes[r.node];
            let node_gt = interpolate_pose(teach_gt, node.timestamp);
            let live_gt = interpolate_pose(repeat_gt, r.time);
            let truth = relative_error(&live_gt, &node_gt);
            LocalizationError::new(
                r.error.longitudinal - truth.longitudinal,
                r.error.lateral - truth.lateral,
                wrap_angle(r.error.heading - truth.heading),
            )
        })
        .collect()
}

pub const RECORD_CSV_HEADER: &str =
    "time,x,y,theta,node,longitudinal,lateral,heading,n_correspondences,iterations,converged";

/// Writes frame records; when `errors` is given it replaces the node-relative error columns.
pub fn write_records_csv<W: Write>(
    records: &[FrameRecord],
    errors: Option<&[LocalizationError]>,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "{RECORD_CSV_HEADER}")?;
    for (i, r) in records.iter().enumerate() {
        let e = errors.map_or(r.error, |e| e[i]);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.time,
            r.pose.x,
            r.pose.y,
            r.pose.theta,
            r.node,
            e.longitudinal,
            e.lateral,
            e.heading,
            r.n_correspondences,
            r.iterations,
            u8::from(r.converged)
        )?;
    }
    out.flush()
}

/// Reads the error columns of a record CSV.
pub fn read_error_csv<R: Read>(reader: R) -> Result<Vec<LocalizationError>, CsvError> {
    let rows = read_numeric_csv(reader, &["longitudinal", "lateral", "heading"])?;
    Ok(rows.iter().map(|r| LocalizationError::new(r[0], r[1], r[2])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odometry::Keyframe;
    use crate::surface_points::SurfacePoint;
    use nalgebra::{Matrix2, Matrix3, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_graph(n: usize, spacing: f64) -> TeachGraph {
        let nodes = (0..n)
            .map(|i| Keyframe {
                id: i,
                pose: Pose2::new(i as f64 * spacing, 0.0, 0.0),
                surface_points: SurfacePointSet {
                    points: vec![SurfacePoint {
                        mean: Vector2::new(1.0, 0.0),
                        normal: Vector2::new(-1.0, 0.0),
                        covariance: Matrix2::identity() * 0.01,
                        n_samples: 6,
                    }],
                    origin_pose: Pose2::identity(),
                },
                timestamp: i as f64,
            })
            .collect();
        TeachGraph::new(nodes, String::new(), 0.0)
    }

    #[test]
    fn closest_node_cases() {
        let g = line_graph(20, 1.5);
        assert_eq!(closest_node(&g, &Pose2::new(7.0 * 1.5, 0.0, 1.0)), 7);
        assert_eq!(closest_node(&g, &Pose2::new(3.5 * 1.5, 0.4, 0.0)), 3);
        assert_eq!(closest_node(&g, &Pose2::new(1e4, 0.0, 0.0)), 19);
    }

    #[test]
    fn closest_node_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = line_graph(500, 1.0);
        for n in &mut g.nodes {
            n.pose = Pose2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), 0.0);
        }
        for _ in 0..200 {
            let p = Pose2::new(rng.random_range(-120.0..120.0), rng.random_range(-120.0..120.0), 0.0);
            let oracle = g
                .nodes
                .iter()
                .map(|n| ((n.pose.translation() - p.translation()).norm(), n.id))
                .min_by(|a, b| a.partial_cmp(b).unwrap())
                .unwrap()
                .1;
            assert_eq!(closest_node(&g, &p), oracle);
        }
    }

    #[test]
    fn map_frame_selection() {
        let g = line_graph(500, 1.5);
        assert_eq!(select_map_frames(&g, 10, 1), vec![10]);
        assert_eq!(select_map_frames(&g, 10, 5), vec![8, 9, 10, 11, 12]);
        assert_eq!(select_map_frames(&g, 0, 5), vec![0, 1, 2]);
        assert_eq!(select_map_frames(&g, 499, 3), vec![498, 499]);
    }

    #[test]
    fn initialize_cases() {
        let g = line_graph(10, 1.5);
        let s = initialize(&g, g.nodes[0].pose, 0.0).unwrap();
        assert_eq!(s.current_node, 0);
        let offset = Pose2::new(0.0, 1.0, 0.0);
        let s = initialize(&g, offset, 0.0).unwrap();
        assert_eq!((s.current_node, s.pose), (0, offset));
        assert_eq!(s.live_window_len(), 0);
        assert!(s.velocity.is_zero());
        assert_eq!(initialize(&g, Pose2::new(100.0, 0.0, 0.0), 0.0).unwrap().current_node, 9);
        assert_eq!(
            initialize(&TeachGraph::default(), Pose2::identity(), 0.0).err(),
            Some(InitError::EmptyGraph)
        );
    }

    #[test]
    fn error_decomposition() {
        let node = Pose2::new(3.0, 4.0, 0.7);
        assert_eq!(relative_error(&node, &node), LocalizationError::new(0.0, 0.0, 0.0));
        let ahead = node.compose(&Pose2::new(0.1, 0.0, 0.0));
        let e = relative_error(&ahead, &node);
        assert!((e.longitudinal - 0.1).abs() < 1e-12 && e.lateral.abs() < 1e-12 && e.heading == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = |p: &Pose2| {
            let (s, c) = p.theta.sin_cos();
            Matrix3::new(c, -s, p.x, s, c, p.y, 0.0, 0.0, 1.0)
        };
        for _ in 0..100 {
            let a = Pose2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-3.0..3.0));
            let b = Pose2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-3.0..3.0));
            let m = h(&b).try_inverse().unwrap() * h(&a);
            let e = relative_error(&a, &b);
            assert!((e.longitudinal - m[(0, 2)]).abs() < 1e-9);
            assert!((e.lateral - m[(1, 2)]).abs() < 1e-9);
            assert!((e.heading - m[(1, 0)].atan2(m[(0, 0)])).abs() < 1e-9);
        }
    }

    #[test]
    fn error_csv_roundtrip() {
        let rec = FrameRecord {
            time: 1.0,
            pose: Pose2::new(1.0, 2.0, 0.1),
            node: 3,
            error: LocalizationError::new(0.01, -0.02, 0.003),
            n_correspondences: 40,
            iterations: 6,
            converged: true,
            registration: None,
            failure: None,
        };
        let mut buf = Vec::new();
        write_records_csv(&[rec.clone(), rec], None, &mut buf).unwrap();
        let errs = read_error_csv(buf.as_slice()).unwrap();
        assert_eq!(errs, vec![LocalizationError::new(0.01, -0.02, 0.003); 2]);
    }
}
