#![allow(dead_code)]

use radar_tr::localization::{ground_truth_errors, run_localization, FrameRecord};
use radar_tr::map_store::TeachGraph;
use radar_tr::odometry::{reports_to_trajectory, run_odometry};
use radar_tr::scenarios::Scenario;
use radar_tr::sim::simulate_sequence_parallel;
use radar_tr::{LocalizationError, PipelineConfig, PolarScan, TimedPose};

/// Scans and ground truth of both passes.
pub struct Simulated {
    pub teach_scans: Vec<PolarScan>,
    pub teach_gt: Vec<TimedPose>,
    pub repeat_scans: Vec<PolarScan>,
    pub repeat_gt: Vec<TimedPose>,
}

pub fn simulate(sc: &Scenario) -> Simulated {
    let (teach_scans, teach_gt) = simulate_sequence_parallel(&sc.world, &sc.teach, &sc.sim);
    let (repeat_scans, repeat_gt) = simulate_sequence_parallel(&sc.changed_world, &sc.repeat, &sc.sim);
    Simulated {
        teach_scans,
        teach_gt,
        repeat_scans,
        repeat_gt,
    }
}

/// Expresses `poses` relative to `origin`, the frame the teach pass starts in.
pub fn anchored(poses: &[TimedPose], origin: &TimedPose) -> Vec<TimedPose> {
    poses
        .iter()
        .map(|p| TimedPose::new(p.time, origin.pose.between(&p.pose)))
        .collect()
}

/// Teach-pass trajectory estimate, in the frame of the first scan.
pub fn teach_trajectory(scans: &[PolarScan], cfg: &PipelineConfig) -> (TeachGraph, Vec<TimedPose>) {
    let (state, reports) = run_odometry(scans, cfg);
    let graph = TeachGraph::new(state.all_keyframes, cfg.to_text(), 0.0);
    (graph, reports_to_trajectory(&reports))
}

pub struct RepeatRun {
    pub records: Vec<FrameRecord>,
    pub errors: Vec<LocalizationError>,
    /// Ground-truth distance driven at each repeat frame.
    pub distance: Vec<f64>,
}

/// Teaches on the scenario's teach pass, then localizes the repeat pass.
pub fn teach_and_repeat(sim: &Simulated, cfg: &PipelineConfig) -> RepeatRun {
    let (graph, _) = teach_trajectory(&sim.teach_scans, cfg);
    repeat_on(&graph, sim, cfg)
}

pub fn repeat_on(graph: &TeachGraph, sim: &Simulated, cfg: &PipelineConfig) -> RepeatRun {
    let origin = &sim.teach_gt[0];
    let first = origin.pose.between(&sim.repeat_gt[0].pose);
    let records = run_localization(graph, &sim.repeat_scans, first, cfg).expect("non-empty map");
    let errors = ground_truth_errors(
        &records,
        graph,
        &anchored(&sim.teach_gt, origin),
        &anchored(&sim.repeat_gt, origin),
    );
    RepeatRun {
        records,
        errors,
        distance: radar_tr::trajectory::arc_lengths(&sim.repeat_gt),
    }
}
