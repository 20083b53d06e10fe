//! Deterministic spinning-radar simulator.
//!
//! Rays are cast per azimuth from the sensor pose at that azimuth's firing
//! time, so a moving platform produces intra-sweep skew. The simulator then
//! adds the range distortions the preprocessing stage is meant to undo:
//!
//! ```text
//! measured = true_range + inject_range_bias - inject_beta * (v · look_dir)
//! ```
//!
//! With `beta = inject_beta` and `dr_r = -inject_range_bias` the corrections in
//! preprocessing cancel both terms exactly; only range quantization remains.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{parse_key_values, ConfigError};
use crate::geometry::{wrap_angle, Pose2, Velocity};
use crate::preprocessing::PolarScan;
use crate::trajectory::TimedPose;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed world: {message}")]
    World { path: String, message: String },
    #[error("line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid simulator setting: {0}")]
    Invalid(String),
}

/// A reflecting wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub reflectivity: f64,
}

/// A round reflector; `radius == 0` makes it an ideal point target that is
/// seen only by the beam pointing at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: [f64; 2],
    pub reflectivity: f64,
    #[serde(default)]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub segments: Vec<Segment>,
    pub scatterers: Vec<Scatterer>,
    pub rng_seed: u64,
}

impl World {
    pub fn validate(&self) -> Result<(), String> {
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.a.iter().chain(&s.b).all(|v| v.is_finite()) && s.reflectivity.is_finite()) {
                return Err(format!("segment {i} is not finite"));
            }
        }
        for (i, s) in self.scatterers.iter().enumerate() {
            if !(s.position.iter().all(|v| v.is_finite()) && s.reflectivity.is_finite() && s.radius.is_finite())
                || s.radius < 0.0
            {
                return Err(format!("scatterer {i} is not finite or has a negative radius"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<World, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let world: World = serde_json::from_str(&text).map_err(|e| SimError::World {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        world.validate().map_err(|message| SimError::World {
            path: path.display().to_string(),
            message,
        })?;
        Ok(world)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world always serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_azimuth: usize,
    pub n_range: usize,
    pub gamma: f64,
    /// Sweeps per second.
    pub rotation_rate: f64,
    /// Angular width within which a point target is seen.
    pub beam_width: f64,
    pub inject_beta: f64,
    pub inject_range_bias: f64,
    /// Probability per bin of a spurious return.
    pub speckle_rate: f64,
    /// Detection threshold the speckle intensities are scaled to.
    pub z_min: f64,
    pub noise_floor: f64,
    /// Encoder error bound: a per-sweep offset in `[-J, J)` plus per-azimuth noise in `[-J/4, J/4)`.
    pub encoder_jitter: f64,
    /// Standard deviation of Gaussian range noise in meters.
    pub range_noise_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_azimuth: 400,
            n_range: 3360,
            gamma: 0.0596,
            rotation_rate: 4.0,
            beam_width: 2.0 * PI / 400.0,
            inject_beta: 0.0,
            inject_range_bias: 0.31,
            speckle_rate: 0.0,
            z_min: 60.0,
            noise_floor: 20.0,
            encoder_jitter: 0.0,
            range_noise_std: 0.0,
        }
    }
}

impl SimConfig {
    pub fn sweep_duration(&self) -> f64 {
        1.0 / self.rotation_rate
    }

    pub fn max_range(&self) -> f64 {
        self.n_range as f64 * self.gamma
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::Invalid(m.to_string()));
        if self.n_azimuth == 0 || self.n_range == 0 {
            return fail("n_azimuth and n_range must be positive");
        }
        if !(self.rotation_rate > 0.0) {
            return fail("rotation_rate must be > 0");
        }
        if !(self.gamma > 0.0) {
            return fail("gamma must be > 0");
        }
        if !(0.0..=1.0).contains(&self.speckle_rate) {
            return fail("speckle_rate must lie in [0, 1]");
        }
        if !(self.beam_width > 0.0) || self.encoder_jitter < 0.0 || self.range_noise_std < 0.0 {
            return fail("beam_width must be > 0; encoder_jitter and range_noise_std >= 0");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let num = || value.parse::<f64>().map_err(|_| format!("`{value}` is not a number"));
        let count = || value.parse::<usize>().map_err(|_| format!("`{value}` is not a count"));
        match key {
            "n_azimuth" => self.n_azimuth = count()?,
            "n_range" => self.n_range = count()?,
            "gamma" => self.gamma = num()?,
            "rotation_rate" => self.rotation_rate = num()?,
            "beam_width" => self.beam_width = num()?,
            "inject_beta" => self.inject_beta = num()?,
            "inject_range_bias" => self.inject_range_bias = num()?,
            "speckle_rate" => self.speckle_rate = num()?,
            "z_min" => self.z_min = num()?,
            "noise_floor" => self.noise_floor = num()?,
            "encoder_jitter" => self.encoder_jitter = num()?,
            "range_noise_std" => self.range_noise_std = num()?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; unset keys keep their defaults, except that
    /// `beam_width` follows `n_azimuth` unless given explicitly.
    pub fn parse(text: &str) -> Result<SimConfig, SimError> {
        let mut cfg = SimConfig::default();
        let pairs = parse_key_values(text).map_err(|e| match e {
            ConfigError::Parse { line, message } => SimError::Config { line, message },
            other => SimError::Config {
                line: 0,
                message: other.to_string(),
            },
        })?;
        let mut beam_given = false;
        for (key, value, line) in pairs {
            beam_given |= key == "beam_width";
            cfg.set(&key, &value).map_err(|message| SimError::Config { line, message })?;
        }
        if !beam_given {
            cfg.beam_width = 2.0 * PI / cfg.n_azimuth.max(1) as f64;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SimConfig, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        SimConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_azimuth = {}\nn_range = {}\ngamma = {}\nrotation_rate = {}\nbeam_width = {}\n\
             inject_beta = {}\ninject_range_bias = {}\nspeckle_rate = {}\nz_min = {}\n\
             noise_floor = {}\nencoder_jitter = {}\nrange_noise_std = {}\n",
            self.n_azimuth,
            self.n_range,
            self.gamma,
            self.rotation_rate,
            self.beam_width,
            self.inject_beta,
            self.inject_range_bias,
            self.speckle_rate,
            self.z_min,
            self.noise_floor,
            self.encoder_jitter,
            self.range_noise_std
        )
    }
}

/// Continuous-time platform motion.
pub trait Motion {
    fn pose_at(&self, t: f64) -> Pose2;
    /// Body-frame twist at `t`.
    fn velocity_at(&self, t: f64) -> Velocity;
}

/// Constant-twist interpolation between timed poses, extrapolated with the
/// first and last twist outside the sampled interval.
pub struct PiecewiseMotion<'a> {
    samples: &'a [TimedPose],
}

impl<'a> PiecewiseMotion<'a> {
    pub fn new(samples: &'a [TimedPose]) -> Self {
        assert!(!samples.is_empty(), "motion needs at least one pose");
        Self { samples }
    }

    fn segment(&self, t: f64) -> Option<usize> {
        if self.samples.len() < 2 {
            return None;
        }
        let i = self.samples.partition_point(|p| p.time <= t);
        Some(i.clamp(1, self.samples.len() - 1) - 1)
    }

    fn twist(&self, i: usize) -> Velocity {
        let (a, b) = (&self.samples[i], &self.samples[i + 1]);
        let dt = b.time - a.time;
        if dt <= 0.0 {
            return Velocity::zero();
        }
        Velocity::from_increment(&a.pose, &b.pose, dt)
    }
}

impl Motion for PiecewiseMotion<'_> {
    fn pose_at(&self, t: f64) -> Pose2 {
        match self.segment(t) {
            None => self.samples[0].pose,
            Some(i) => {
                let a = &self.samples[i];
                let v = self.twist(i);
                if v.is_zero() {
                    a.pose
                } else {
                    a.pose.compose(&v.integrate(t - a.time))
                }
            }
        }
    }

    fn velocity_at(&self, t: f64) -> Velocity {
        self.segment(t).map_or(Velocity::zero(), |i| self.twist(i))
    }
}

/// A single first-hit return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub reflectivity: f64,
}

fn ray_segment(o: [f64; 2], d: [f64; 2], s: &Segment) -> Option<f64> {
    let e = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
    let denom = d[0] * e[1] - d[1] * e[0];
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = [s.a[0] - o[0], s.a[1] - o[1]];
    let t = (w[0] * e[1] - w[1] * e[0]) / denom;
    let u = (w[0] * d[1] - w[1] * d[0]) / denom;
    (t > 1e-9 && (0.0..=1.0).contains(&u)).then_some(t)
}

fn ray_circle(o: [f64; 2], d: [f64; 2], c: [f64; 2], r: f64) -> Option<f64> {
    let w = [c[0] - o[0], c[1] - o[1]];
    let proj = w[0] * d[0] + w[1] * d[1];
    let disc = proj * proj - (w[0] * w[0] + w[1] * w[1] - r * r);
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    [proj - root, proj + root].into_iter().find(|t| *t > 1e-9)
}

/// First return along a world-frame ray from `origin` with direction angle `angle`.
pub fn cast_ray(world: &World, origin: [f64; 2], angle: f64, beam_width: f64, max_range: f64) -> Option<Hit> {
    let d = [angle.cos(), angle.sin()];
    let mut best: Option<Hit> = None;
    let mut consider = |range: f64, reflectivity: f64| {
        if range <= max_range && best.is_none_or(|b| range < b.range) {
            best = Some(Hit { range, reflectivity });
        }
    };
    for s in &world.segments {
        if let Some(t) = ray_segment(origin, d, s) {
            consider(t, s.reflectivity);
        }
    }
    for sc in &world.scatterers {
        if sc.radius > 0.0 {
            if let Some(t) = ray_circle(origin, d, sc.position, sc.radius) {
                consider(t, sc.reflectivity);
            }
        } else {
            let dx = sc.position[0] - origin[0];
            let dy = sc.position[1] - origin[1];
            let off = wrap_angle(dy.atan2(dx) - angle);
            if (-0.5 * beam_width..0.5 * beam_width).contains(&off) {
                consider(dx.hypot(dy), sc.reflectivity);
            }
        }
    }
    best
}

fn scan_rng(seed: u64, scan_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scan_index);
    rng
}

/// Renders one sweep starting at `t0`. Randomness comes from a stream keyed by
/// the world seed and `scan_index` only.
pub fn render_scan(world: &World, motion: &dyn Motion, t0: f64, cfg: &SimConfig, scan_index: u64) -> PolarScan {
    let mut rng = scan_rng(world.rng_seed, scan_index);
    let n_a = cfg.n_azimuth;
    let mut scan = PolarScan::zeros(n_a, cfg.n_range, cfg.gamma, t0, cfg.sweep_duration());
    scan.intensities.fill(cfg.noise_floor as f32);

    let jitter = cfg.encoder_jitter;
    let sweep_offset = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
    let noise = (cfg.range_noise_std > 0.0).then(|| Normal::new(0.0, cfg.range_noise_std).unwrap());
    for a in 0..n_a {
        let mut angle = 2.0 * PI * a as f64 / n_a as f64 + sweep_offset;
        if jitter > 0.0 {
            angle += rng.random_range(-0.25 * jitter..0.25 * jitter);
        }
        scan.encoder_angles[a] = angle;
        let t = scan.azimuth_times[a];
        let pose = motion.pose_at(t);
        let Some(hit) = cast_ray(world, [pose.x, pose.y], pose.theta + angle, cfg.beam_width, cfg.max_range()) else {
            continue;
        };
        let v = motion.velocity_at(t);
        let radial = v.vx * angle.cos() + v.vy * angle.sin();
        let mut measured = hit.range + cfg.inject_range_bias - cfg.inject_beta * radial;
        if let Some(n) = &noise {
            measured += n.sample(&mut rng);
        }
        let bin = (measured / cfg.gamma).round();
        if bin >= 0.0 && (bin as usize) < cfg.n_range {
            scan.row_mut(a)[bin as usize] = (cfg.noise_floor + hit.reflectivity) as f32;
        }
    }

    if cfg.speckle_rate > 0.0 {
        let total = n_a * cfg.n_range;
        let lo = 0.5 * cfg.z_min;
        let hi = 2.0 * cfg.z_min;
        if cfg.speckle_rate >= 1.0 {
            for v in scan.intensities.iter_mut() {
                *v = rng.random_range(lo..hi) as f32;
            }
        } else {
            let gaps = Geometric::new(cfg.speckle_rate).unwrap();
            let mut idx = gaps.sample(&mut rng) as usize;
            while idx < total {
                scan.intensities[idx] = rng.random_range(lo..hi) as f32;
                idx = idx.saturating_add(1 + gaps.sample(&mut rng) as usize);
            }
        }
    }
    scan
}

/// One scan per trajectory sample, each starting at the sample's time.
pub fn simulate_sequence(world: &World, trajectory: &[TimedPose], cfg: &SimConfig) -> (Vec<PolarScan>, Vec<TimedPose>) {
    let motion = PiecewiseMotion::new(trajectory);
    let scans = trajectory
        .iter()
        .enumerate()
        .map(|(i, p)| render_scan(world, &motion, p.time, cfg, i as u64))
        .collect();
    (scans, trajectory.to_vec())
}

/// Same output as [`simulate_sequence`], rendered on the rayon pool.
pub fn simulate_sequence_parallel(
    world: &World,
    trajectory: &[TimedPose],
    cfg: &SimConfig,
) -> (Vec<PolarScan>, Vec<TimedPose>) {
    let motion = PiecewiseMotion::new(trajectory);
    let scans = trajectory
        .par_iter()
        .enumerate()
        .map(|(i, p)| render_scan(world, &motion, p.time, cfg, i as u64))
        .collect();
    (scans, trajectory.to_vec())
}

/// Removes exactly `floor(fraction * N)` scatterers and appends `added` new ones
/// drawn uniformly from the scatterers' bounding box where `allowed` holds.
pub fn change_environment(
    world: &World,
    fraction: f64,
    added: usize,
    seed: u64,
    allowed: &dyn Fn(f64, f64) -> bool,
) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = world.scatterers.len();
    let n_remove = ((fraction.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let removed = rand::seq::index::sample(&mut rng, n, n_remove);
    let mut keep = vec![true; n];
    for i in removed.iter() {
        keep[i] = false;
    }
    let mut scatterers: Vec<Scatterer> = world
        .scatterers
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| *s)
        .collect();

    if added > 0 && n > 0 {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in &world.scatterers {
            x0 = x0.min(s.position[0]);
            y0 = y0.min(s.position[1]);
            x1 = x1.max(s.position[0]);
            y1 = y1.max(s.position[1]);
        }
        let mut count = 0;
        let mut attempts = 0;
        while count < added && attempts < 10_000 * added {
            attempts += 1;
            let x = rng.random_range(x0..=x1);
            let y = rng.random_range(y0..=y1);
            if !allowed(x, y) {
                continue;
            }
            let template = world.scatterers[rng.random_range(0..n)];
            scatterers.push(Scatterer {
                position: [x, y],
                ..template
            });
            count += 1;
        }
    }
    World {
        segments: world.segments.clone(),
        scatterers,
        rng_seed: world.rng_seed,
    }
}
