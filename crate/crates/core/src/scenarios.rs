//! Built-in simulated scenarios.
//!
//! Both worlds are generated from a reference path: rows of buildings with
//! gaps between them line the street, a continuous wall runs behind each row,
//! and round reflectors (poles, trees, parked cars) stand at the roadside.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::geometry::Pose2;
use crate::sim::{change_environment, Scatterer, Segment, SimConfig, World};
use crate::trajectory::{save_trajectory, TimedPose};

pub const WORLD_FILE: &str = "world.json";
pub const CHANGED_WORLD_FILE: &str = "world_changed.json";
pub const TEACH_FILE: &str = "trajectory.csv";
pub const REPEAT_FILE: &str = "repeat_trajectory.csv";
pub const SIM_CONFIG_FILE: &str = "sim.cfg";
pub const PIPELINE_CONFIG_FILE: &str = "pipeline.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub world: World,
    /// World seen on the repeat pass.
    pub changed_world: World,
    pub teach: Vec<TimedPose>,
    pub repeat: Vec<TimedPose>,
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
}

impl Scenario {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(WORLD_FILE), self.world.to_json())?;
        std::fs::write(dir.join(CHANGED_WORLD_FILE), self.changed_world.to_json())?;
        std::fs::write(dir.join(SIM_CONFIG_FILE), self.sim.to_text())?;
        std::fs::write(dir.join(PIPELINE_CONFIG_FILE), self.pipeline.to_text())?;
        let csv = |e: crate::trajectory::CsvError| std::io::Error::other(e.to_string());
        save_trajectory(&self.teach, &dir.join(TEACH_FILE)).map_err(csv)?;
        save_trajectory(&self.repeat, &dir.join(REPEAT_FILE)).map_err(csv)
    }
}

pub fn names() -> &'static [&'static str] {
    &["corridor", "loop"]
}

pub fn by_name(name: &str) -> Option<Scenario> {
    match name {
        "corridor" => Some(corridor()),
        "loop" => Some(loop_200m()),
        _ => None,
    }
}

/// Arc-length parametrized planar path.
trait Path2 {
    fn length(&self) -> f64;
    /// Point and tangent heading at arc length `s`.
    fn at(&self, s: f64) -> ([f64; 2], f64);
}

struct Straight {
    start: f64,
    end: f64,
}

impl Path2 for Straight {
    fn length(&self) -> f64 {
        self.end - self.start
    }

    fn at(&self, s: f64) -> ([f64; 2], f64) {
        ([self.start + s, 0.0], 0.0)
    }
}

/// Closed counter-clockwise loop of four identical left turns joined by
/// straights. Each turn ramps its curvature linearly up to `1 / radius`,
/// holds it and ramps back down, so the yaw rate changes smoothly. Starts
/// midway along the first long straight.
struct SmoothLoop {
    samples: Vec<([f64; 2], f64)>,
    step: f64,
}

impl SmoothLoop {
    const STEP: f64 = 0.01;

    fn new(perimeter: f64, short_side: f64, radius: f64, ramp: f64) -> Self {
        let k = 1.0 / radius;
        let hold = (PI / 2.0 - k * ramp) / k;
        assert!(hold >= 0.0, "ramp too long for a quarter turn");
        let turn = 2.0 * ramp + hold;
        let long_side = perimeter / 2.0 - 2.0 * turn - short_side;
        assert!(long_side > 0.0, "perimeter too short");
        // (length, curvature at start, curvature at end)
        let mut pieces = vec![(long_side / 2.0, 0.0, 0.0)];
        for side in [short_side, long_side, short_side, long_side / 2.0] {
            pieces.extend([(ramp, 0.0, k), (hold, k, k), (ramp, k, 0.0), (side, 0.0, 0.0)]);
        }
        let n = (perimeter / Self::STEP).round() as usize;
        let curvature = |mut s: f64| {
            for &(len, k0, k1) in &pieces {
                if s <= len {
                    return k0 + (k1 - k0) * s / len.max(1e-12);
                }
                s -= len;
            }
            0.0
        };
        let mut samples = Vec::with_capacity(n + 1);
        let (mut x, mut y, mut h) = (0.0, 0.0, 0.0);
        samples.push(([x, y], h));
        for i in 0..n {
            let s = i as f64 * Self::STEP;
            let dh = 0.5 * Self::STEP * (curvature(s) + curvature(s + Self::STEP));
            let mid = h + 0.5 * dh;
            x += Self::STEP * mid.cos();
            y += Self::STEP * mid.sin();
            h += dh;
            samples.push(([x, y], h));
        }
        Self {
            samples,
            step: Self::STEP,
        }
    }
}

impl Path2 for SmoothLoop {
    fn length(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.step
    }

    fn at(&self, s: f64) -> ([f64; 2], f64) {
        let s = s.rem_euclid(self.length());
        let i = ((s / self.step) as usize).min(self.samples.len() - 2);
        let f = s / self.step - i as f64;
        let ((a, ha), (b, hb)) = (self.samples[i], self.samples[i + 1]);
        ([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])], ha + f * (hb - ha))
    }
}

fn offset_point(path: &dyn Path2, s: f64, offset: f64) -> [f64; 2] {
    let (p, heading) = path.at(s);
    // left normal
    [p[0] - offset * heading.sin(), p[1] + offset * heading.cos()]
}

/// Wall parallel to `path` at signed `offset` (positive = left) with random
/// recesses of depth `recess` away from the path.
fn recessed_wall(path: &dyn Path2, s0: f64, s1: f64, offset: f64, recess: f64, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let away = offset.signum();
    let mut points = Vec::new();
    let mut s = s0;
    let mut depth = 0.0;
    let mut next_change = s0 + rng.random_range(3.0..8.0);
    let step = 1.0;
    points.push(offset_point(path, s, offset));
    while s < s1 {
        let target = (s + step).min(s1).min(next_change);
        s = target;
        points.push(offset_point(path, s, offset + away * depth));
        if s >= next_change && s < s1 {
            depth = if depth == 0.0 { rng.random_range(0.5..1.0) * recess } else { 0.0 };
            points.push(offset_point(path, s, offset + away * depth));
            next_change = s + if depth == 0.0 { rng.random_range(4.0..10.0) } else { rng.random_range(1.5..4.0) };
        }
    }
    let reflectivity = rng.random_range(60.0..90.0);
    polyline(&points, reflectivity)
}

fn polyline(points: &[[f64; 2]], reflectivity: f64) -> Vec<Segment> {
    points
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| Segment {
            a: w[0],
            b: w[1],
            reflectivity,
        })
        .collect()
}

/// One side of a street: buildings of random length and setback separated by
/// gaps. Each building is a front facade plus two side walls reaching `depth`
/// meters back, so gaps expose surfaces that face along the street.
fn building_row(
    path: &dyn Path2,
    s0: f64,
    s1: f64,
    offset: f64,
    setback: f64,
    depth: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<Segment> {
    let away = offset.signum();
    let mut out = Vec::new();
    let mut s = s0;
    while s < s1 {
        let len = rng.random_range(8.0..20.0f64).min(s1 - s);
        let front = offset + away * rng.random_range(0.0..setback);
        let back = front + away * rng.random_range(depth.0..depth.1);
        let mut facade = vec![offset_point(path, s, back), offset_point(path, s, front)];
        let mut u = s;
        while u < s + len {
            u = (u + 1.0).min(s + len);
            facade.push(offset_point(path, u, front));
        }
        facade.push(offset_point(path, s + len, back));
        out.extend(polyline(&facade, rng.random_range(60.0..90.0)));
        s += len + rng.random_range(3.0..7.0);
    }
    out
}

fn roadside_objects(path: &dyn Path2, s0: f64, s1: f64, lateral: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<Scatterer> {
    let mut out = Vec::new();
    for side in [-1.0, 1.0] {
        let mut s = s0 + rng.random_range(0.0..4.0);
        while s < s1 {
            let off = side * rng.random_range(lateral.0..lateral.1);
            out.push(Scatterer {
                position: offset_point(path, s, off),
                reflectivity: rng.random_range(50.0..100.0),
                radius: rng.random_range(0.25..1.0),
            });
            s += rng.random_range(2.0..7.0);
        }
    }
    out
}

/// Trajectory along `path` sampled at the sweep rate: accelerate at `accel`
/// from rest (or start at `v_max` when `accel` is infinite), then cruise,
/// stopping after `distance` meters. `lateral(s)` shifts the vehicle sideways.
fn drive(
    path: &dyn Path2,
    distance: f64,
    v_max: f64,
    accel: f64,
    rate: f64,
    lateral: &dyn Fn(f64) -> f64,
) -> Vec<TimedPose> {
    let dt = 1.0 / rate;
    let ramp_t = if accel.is_finite() { v_max / accel } else { 0.0 };
    let ramp_s = 0.5 * v_max * ramp_t;
    let arc = |t: f64| {
        if t < ramp_t {
            0.5 * accel * t * t
        } else {
            ramp_s + v_max * (t - ramp_t)
        }
    };
    let pose = |s: f64| {
        let h = 1e-3;
        let p = offset_point(path, s, lateral(s));
        let a = offset_point(path, s - h, lateral(s - h));
        let b = offset_point(path, s + h, lateral(s + h));
        Pose2::new(p[0], p[1], (b[1] - a[1]).atan2(b[0] - a[0]))
    };
    let mut out = Vec::new();
    let mut k = 0;
    loop {
        let t = k as f64 * dt;
        let s = arc(t);
        if s > distance + 1e-9 {
            break;
        }
        out.push(TimedPose::new(t, pose(s)));
        k += 1;
    }
    out
}

fn scenario_sim() -> SimConfig {
    SimConfig {
        inject_beta: 0.05,
        speckle_rate: 5e-5,
        encoder_jitter: 0.002,
        range_noise_std: 0.02,
        ..SimConfig::default()
    }
}

/// The simulated facades are small, so a finer grid keeps more surface points.
fn scenario_pipeline() -> PipelineConfig {
    PipelineConfig {
        beta: 0.05,
        grid_res: 2.5,
        ..PipelineConfig::default()
    }
}

/// Straight 12 m wide corridor driven at a constant 10 m/s: 40 sweeps, 2.5 m apart.
pub fn corridor() -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FF1D0);
    let path = Straight { start: -40.0, end: 150.0 };
    let len = path.length();
    let mut segments = building_row(&path, 0.0, len, 6.0, 2.0, (6.0, 12.0), &mut rng);
    segments.extend(building_row(&path, 0.0, len, -6.0, 2.0, (6.0, 12.0), &mut rng));
    segments.extend(recessed_wall(&path, 0.0, len, 24.0, 3.0, &mut rng));
    segments.extend(recessed_wall(&path, 0.0, len, -24.0, 3.0, &mut rng));
    segments.push(Segment { a: [-40.0, -24.0], b: [-40.0, 24.0], reflectivity: 80.0 });
    segments.push(Segment { a: [150.0, -24.0], b: [150.0, 24.0], reflectivity: 80.0 });
    let scatterers = roadside_objects(&path, 0.0, len, (3.5, 5.0), &mut rng);
    let world = World {
        segments,
        scatterers,
        rng_seed: 11,
    };
    let changed_world = change_environment(&world, 0.2, 10, 12, &|_, y| y.abs() > 3.0 && y.abs() < 5.5);

    let line = Straight { start: 0.0, end: 100.0 };
    let teach = drive(&line, 97.5, 10.0, f64::INFINITY, 4.0, &|_| 0.0);
    let repeat = drive(&line, 97.5, 8.0, f64::INFINITY, 4.0, &|s| 0.3 * (2.0 * PI * s / 40.0).sin());
    Scenario {
        name: "corridor".into(),
        world,
        changed_world,
        teach,
        repeat,
        sim: scenario_sim(),
        pipeline: scenario_pipeline(),
    }
}

/// 200 m loop of four smoothed left turns between building rows, driven from rest.
/// The drive stops a few meters short of closing the loop.
pub fn loop_200m() -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(0x100_9200);
    let path = SmoothLoop::new(200.0, 10.0, 10.0, 10.0);
    let len = path.length();
    // the loop turns left, so the inner block is shallow and fully built
    let mut segments = building_row(&path, 0.0, len, 9.0, 1.5, (3.0, 5.0), &mut rng);
    segments.extend(recessed_wall(&path, 0.0, len, 16.0, 1.0, &mut rng));
    segments.extend(building_row(&path, 0.0, len, -9.0, 2.5, (6.0, 12.0), &mut rng));
    segments.extend(recessed_wall(&path, 0.0, len, -28.0, 3.0, &mut rng));
    let scatterers = roadside_objects(&path, 0.0, len, (3.5, 6.5), &mut rng);
    let world = World {
        segments,
        scatterers,
        rng_seed: 21,
    };
    let samples: Vec<[f64; 2]> = (0..(len as usize)).map(|i| path.at(i as f64).0).collect();
    let clear = move |x: f64, y: f64| {
        let d = samples
            .iter()
            .map(|p| (p[0] - x).hypot(p[1] - y))
            .fold(f64::INFINITY, f64::min);
        (3.5..7.0).contains(&d)
    };
    let changed_world = change_environment(&world, 0.2, 10, 22, &clear);

    let distance = len - 5.0;
    let teach = drive(&path, distance, 8.0, 2.0, 4.0, &|_| 0.0);
    let repeat = drive(&path, distance, 6.0, 2.0, 4.0, &|s| 0.3 * (2.0 * PI * s / 50.0).sin());
    Scenario {
        name: "loop".into(),
        world,
        changed_world,
        teach,
        repeat,
        sim: scenario_sim(),
        pipeline: scenario_pipeline(),
    }
}
