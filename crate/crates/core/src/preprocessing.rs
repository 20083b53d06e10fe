//! Polar radar sweep to deskewed Cartesian point cloud.
//!
//! The chain is: per-azimuth k-strongest peak selection, conversion to
//! Cartesian coordinates with Doppler and static range correction along the
//! encoder-measured antenna angle, then motion compensation into the sensor
//! frame at the start of the sweep under a constant body twist.

use std::f64::consts::PI;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::geometry::Velocity;

/// One raw sweep of a spinning radar.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarScan {
    pub n_azimuth: usize,
    pub n_range: usize,
    /// Range resolution reported by the sensor (meters per bin).
    pub gamma: f64,
    /// Reference timestamp; azimuth 0 is acquired at this time.
    pub scan_time: f64,
    /// Measured antenna angle of every azimuth, radians.
    pub encoder_angles: Vec<f64>,
    /// Acquisition time of every azimuth, seconds.
    pub azimuth_times: Vec<f64>,
    /// Row-major `n_azimuth x n_range` intensity image.
    pub intensities: Vec<f32>,
}

impl PolarScan {
    /// All-zero scan with uniform angles and times spread over `sweep_duration`.
    pub fn zeros(n_azimuth: usize, n_range: usize, gamma: f64, scan_time: f64, sweep_duration: f64) -> Self {
        let encoder_angles = (0..n_azimuth)
            .map(|a| 2.0 * PI * a as f64 / n_azimuth as f64)
            .collect();
        let azimuth_times = (0..n_azimuth)
            .map(|a| scan_time + sweep_duration * a as f64 / n_azimuth as f64)
            .collect();
        Self {
            n_azimuth,
            n_range,
            gamma,
            scan_time,
            encoder_angles,
            azimuth_times,
            intensities: vec![0.0; n_azimuth * n_range],
        }
    }

    /// Time spanned by the azimuth timestamps.
    pub fn sweep_duration(&self) -> f64 {
        match (self.azimuth_times.first(), self.azimuth_times.last()) {
            (Some(a), Some(b)) => (b - a).max(0.0),
            _ => 0.0,
        }
    }

    pub fn row(&self, azimuth: usize) -> &[f32] {
        &self.intensities[azimuth * self.n_range..(azimuth + 1) * self.n_range]
    }

    pub fn row_mut(&mut self, azimuth: usize) -> &mut [f32] {
        let n = self.n_range;
        &mut self.intensities[azimuth * n..(azimuth + 1) * n]
    }

    /// Checks array sizes and value sanity.
    pub fn validate(&self) -> Result<(), String> {
        if self.encoder_angles.len() != self.n_azimuth {
            return Err(format!(
                "expected {} encoder angles, found {}",
                self.n_azimuth,
                self.encoder_angles.len()
            ));
        }
        if self.azimuth_times.len() != self.n_azimuth {
            return Err(format!(
                "expected {} azimuth times, found {}",
                self.n_azimuth,
                self.azimuth_times.len()
            ));
        }
        if self.intensities.len() != self.n_azimuth * self.n_range {
            return Err(format!(
                "expected {} intensities, found {}",
                self.n_azimuth * self.n_range,
                self.intensities.len()
            ));
        }
        if self.azimuth_times.windows(2).any(|w| w[1] < w[0]) {
            return Err("azimuth times must be non-decreasing".into());
        }
        if self.intensities.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("intensities must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// A single return selected by the peak filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarDetection {
    pub azimuth_index: usize,
    pub range_index: usize,
    pub intensity: f32,
    pub theta_a: f64,
    pub time: f64,
}

/// Cartesian detections with per-point acquisition time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector2<f64>>,
    pub times: Vec<f64>,
    pub intensities: Vec<f32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vector2<f64>, time: f64, intensity: f32) {
        self.points.push(p);
        self.times.push(time);
        self.intensities.push(intensity);
    }
}

/// Indices of the `k` strongest bins of `row` strictly above `z_min`,
/// strongest first; equal intensities go to the smaller range index.
pub fn k_strongest_row(row: &[f32], k: usize, z_min: f64) -> Vec<usize> {
    let mut candidates: Vec<(f32, usize)> = row
        .iter()
        .enumerate()
        .filter(|(_, v)| f64::from(**v) > z_min)
        .map(|(d, v)| (*v, d))
        .collect();
    let order = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(order);
    candidates.into_iter().map(|(_, d)| d).collect()
}

fn detections_for_row(scan: &PolarScan, a: usize, k: usize, z_min: f64) -> Vec<PolarDetection> {
    let row = scan.row(a);
    k_strongest_row(row, k, z_min)
        .into_iter()
        .map(|d| PolarDetection {
            azimuth_index: a,
            range_index: d,
            intensity: row[d],
            theta_a: scan.encoder_angles[a],
            time: scan.azimuth_times[a],
        })
        .collect()
}

/// Per-azimuth k-strongest filter with intensity threshold.
///
/// Output is ordered by azimuth, then strongest first within an azimuth.
pub fn k_strongest_filter(scan: &PolarScan, k: usize, z_min: f64) -> Vec<PolarDetection> {
    assert!(k >= 1, "k must be at least 1");
    (0..scan.n_azimuth)
        .flat_map(|a| detections_for_row(scan, a, k, z_min))
        .collect()
}

/// Same output as [`k_strongest_filter`], computed across threads.
pub fn k_strongest_filter_parallel(scan: &PolarScan, k: usize, z_min: f64) -> Vec<PolarDetection> {
    assert!(k >= 1, "k must be at least 1");
    let rows: Vec<Vec<PolarDetection>> = (0..scan.n_azimuth)
        .into_par_iter()
        .map(|a| detections_for_row(scan, a, k, z_min))
        .collect();
    rows.into_iter().flatten().collect()
}

/// Velocity-dependent range offset along look direction `theta_a`.
pub fn doppler_offset(v: &Velocity, theta_a: f64, beta: f64) -> f64 {
    beta * (v.vx * theta_a.cos() + v.vy * theta_a.sin())
}

fn look_angle(det: &PolarDetection, n_azimuth: usize, cfg: &PipelineConfig) -> f64 {
    if cfg.use_encoder || n_azimuth == 0 {
        det.theta_a
    } else {
        2.0 * PI * det.azimuth_index as f64 / n_azimuth as f64
    }
}

/// Corrected range of one detection; `None` when it is not positive.
pub fn corrected_range(det: &PolarDetection, theta: f64, v: &Velocity, cfg: &PipelineConfig) -> Option<f64> {
    let mut range = det.range_index as f64 * cfg.gamma;
    if cfg.use_doppler {
        range += doppler_offset(v, theta, cfg.beta);
    }
    if cfg.use_range_offset {
        range += cfg.dr_r;
    }
    (range > 0.0).then_some(range)
}

/// Maps detections to Cartesian points.
///
/// `n_azimuth` is only consulted when encoder angles are disabled and the
/// uniform `2πa/N_a` spacing is substituted.
pub fn polar_to_cartesian(
    detections: &[PolarDetection],
    n_azimuth: usize,
    v: &Velocity,
    cfg: &PipelineConfig,
) -> PointCloud {
    let mut cloud = PointCloud::default();
    for det in detections {
        let theta = look_angle(det, n_azimuth, cfg);
        if let Some(range) = corrected_range(det, theta, v, cfg) {
            let (s, c) = theta.sin_cos();
            cloud.push(Vector2::new(range * c, range * s), det.time, det.intensity);
        }
    }
    cloud
}

/// Re-expresses every point in the sensor frame at `ref_time`.
pub fn motion_compensate(cloud: &PointCloud, v: &Velocity, ref_time: f64) -> PointCloud {
    if v.is_zero() {
        return cloud.clone();
    }
    let points = cloud
        .points
        .iter()
        .zip(&cloud.times)
        .map(|(p, t)| v.integrate(t - ref_time).transform_point(p))
        .collect();
    PointCloud {
        points,
        times: cloud.times.clone(),
        intensities: cloud.intensities.clone(),
    }
}

/// Full preprocessing chain with the reference single-threaded filter.
pub fn preprocess(scan: &PolarScan, v: &Velocity, cfg: &PipelineConfig) -> PointCloud {
    preprocess_with(scan, v, cfg, false)
}

/// Full preprocessing chain; `parallel` only changes how the filter is run.
pub fn preprocess_with(scan: &PolarScan, v: &Velocity, cfg: &PipelineConfig, parallel: bool) -> PointCloud {
    let detections = detect(scan, cfg, parallel);
    cloud_from_detections(&detections, scan, v, cfg)
}

/// The velocity-independent first stage of [`preprocess_with`].
pub fn detect(scan: &PolarScan, cfg: &PipelineConfig, parallel: bool) -> Vec<PolarDetection> {
    if parallel {
        k_strongest_filter_parallel(scan, cfg.k, cfg.z_min)
    } else {
        k_strongest_filter(scan, cfg.k, cfg.z_min)
    }
}

/// The velocity-dependent rest of [`preprocess_with`], for detections of `scan`.
pub fn cloud_from_detections(
    detections: &[PolarDetection],
    scan: &PolarScan,
    v: &Velocity,
    cfg: &PipelineConfig,
) -> PointCloud {
    let cloud = polar_to_cartesian(detections, scan.n_azimuth, v, cfg);
    if cfg.use_motion_comp {
        motion_compensate(&cloud, v, scan.scan_time)
    } else {
        cloud
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_row(values: &[f32]) -> PolarScan {
        let mut scan = PolarScan::zeros(1, values.len(), 0.0596, 0.0, 0.25);
        scan.intensities.copy_from_slice(values);
        scan
    }

    #[test]
    fn k_strongest_direct() {
        let scan = one_row(&[10.0, 70.0, 65.0, 80.0]);
        let dets = k_strongest_filter(&scan, 2, 60.0);
        let idx: Vec<usize> = dets.iter().map(|d| d.range_index).collect();
        assert_eq!(idx, vec![3, 1]);
        assert_eq!(dets[0].intensity, 80.0);
        assert_eq!(dets[1].intensity, 70.0);
    }

    #[test]
    fn k_strongest_all_below_threshold() {
        let scan = one_row(&[10.0, 60.0, 59.0, 0.0, 60.0]);
        assert!(k_strongest_filter(&scan, 2, 60.0).is_empty());
    }

    #[test]
    fn k_strongest_ties_prefer_near_bins() {
        let scan = one_row(&[90.0, 90.0, 90.0, 10.0, 90.0]);
        let idx: Vec<usize> = k_strongest_filter(&scan, 3, 60.0).iter().map(|d| d.range_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    fn sort_oracle(row: &[f32], k: usize, z_min: f64) -> Vec<usize> {
        let mut all: Vec<(f32, usize)> = row.iter().copied().zip(0..).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter()
            .take(k)
            .filter(|(v, _)| f64::from(*v) > z_min)
            .map(|(_, d)| d)
            .collect()
    }

    #[test]
    fn k_strongest_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let row: Vec<f32> = (0..200).map(|_| rng.random_range(0.0..120.0f32).round()).collect();
            let scan = one_row(&row);
            let got: Vec<usize> = k_strongest_filter(&scan, 12, 60.0).iter().map(|d| d.range_index).collect();
            assert_eq!(got, sort_oracle(&row, 12, 60.0));
        }
    }

    #[test]
    fn parallel_filter_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scan = PolarScan::zeros(64, 300, 0.0596, 1.0, 0.25);
        for v in scan.intensities.iter_mut() {
            *v = rng.random_range(0.0..100.0);
        }
        assert_eq!(k_strongest_filter(&scan, 5, 60.0), k_strongest_filter_parallel(&scan, 5, 60.0));
    }

    #[test]
    fn doppler_offset_cases() {
        assert_eq!(doppler_offset(&Velocity::zero(), 1.3, 0.05), 0.0);
        assert!((doppler_offset(&Velocity::new(10.0, 0.0, 0.0), 0.0, 0.05) - 0.5).abs() < 1e-15);
        assert!(doppler_offset(&Velocity::new(10.0, 0.0, 0.0), PI / 2.0, 0.05).abs() < 1e-15);
    }

    fn det(d: usize, theta: f64) -> PolarDetection {
        PolarDetection {
            azimuth_index: 0,
            range_index: d,
            intensity: 100.0,
            theta_a: theta,
            time: 0.5,
        }
    }

    #[test]
    fn polar_to_cartesian_cases() {
        let cfg = PipelineConfig::default();
        let v = Velocity::zero();
        let cloud = polar_to_cartesian(&[det(100, 0.0)], 1, &v, &cfg);
        assert!((cloud.points[0].x - 5.65).abs() < 1e-12 && cloud.points[0].y == 0.0);
        assert_eq!(cloud.times[0], 0.5);
        let cloud = polar_to_cartesian(&[det(100, PI / 2.0)], 1, &v, &cfg);
        assert!(cloud.points[0].x.abs() < 1e-12 && (cloud.points[0].y - 5.65).abs() < 1e-12);
        assert!(polar_to_cartesian(&[det(4, 0.0)], 1, &v, &cfg).is_empty());
    }

    #[test]
    fn uniform_angles_replace_encoder_when_disabled() {
        let cfg = PipelineConfig {
            use_encoder: false,
            ..Default::default()
        };
        let mut d = det(100, 0.3);
        d.azimuth_index = 100;
        let cloud = polar_to_cartesian(&[d], 400, &Velocity::zero(), &cfg);
        let angle = cloud.points[0].y.atan2(cloud.points[0].x);
        assert!((angle - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn motion_compensation_cases() {
        let mut cloud = PointCloud::default();
        cloud.push(Vector2::new(1.0, 0.0), 0.0, 1.0);
        cloud.push(Vector2::new(-3.0, 2.5), 0.13, 1.0);
        assert_eq!(motion_compensate(&cloud, &Velocity::zero(), 0.0), cloud);
        let out = motion_compensate(&cloud, &Velocity::new(1.0, 0.5, 0.3), 0.0);
        assert_eq!(out.points[0], Vector2::new(1.0, 0.0));

        let mut single = PointCloud::default();
        single.push(Vector2::new(5.0, 0.0), 0.1, 1.0);
        let v = Velocity::new(2.0, 0.0, 0.0);
        let out = motion_compensate(&single, &v, 0.0);
        assert!((out.points[0].x - 5.2).abs() < 1e-12 && out.points[0].y.abs() < 1e-12);
    }

    /// Euler integration of the body twist, independent of the closed form.
    fn integrate_twist(v: &Velocity, dt: f64, steps: usize) -> Pose2 {
        let h = dt / steps as f64;
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..steps {
            let mid = th + 0.5 * v.omega * h;
            x += (v.vx * mid.cos() - v.vy * mid.sin()) * h;
            y += (v.vx * mid.sin() + v.vy * mid.cos()) * h;
            th += v.omega * h;
        }
        Pose2::new(x, y, th)
    }

    #[test]
    fn motion_compensation_matches_numeric_integration() {
        let v = Velocity::new(8.0, -0.7, 0.9);
        let mut cloud = PointCloud::default();
        cloud.push(Vector2::new(12.0, -4.0), 0.21, 1.0);
        let out = motion_compensate(&cloud, &v, 0.0);
        let oracle = integrate_twist(&v, 0.21, 200_000).transform_point(&cloud.points[0]);
        assert!((out.points[0] - oracle).norm() < 1e-8);
    }

    #[test]
    fn empty_scan_gives_empty_cloud() {
        let scan = PolarScan::zeros(400, 500, 0.0596, 0.0, 0.25);
        assert!(preprocess(&scan, &Velocity::zero(), &PipelineConfig::default()).is_empty());
    }

    #[test]
    fn encoder_angles_place_points_on_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut scan = PolarScan::zeros(90, 400, 0.0596, 0.0, 0.25);
        for a in 0..scan.n_azimuth {
            scan.encoder_angles[a] += rng.random_range(-0.01..0.01);
            let d = rng.random_range(50..400);
            scan.row_mut(a)[d] = 100.0;
        }
        let cfg = PipelineConfig::default();
        let cloud = preprocess(&scan, &Velocity::zero(), &cfg);
        assert_eq!(cloud.len(), 90);
        let dets = k_strongest_filter(&scan, cfg.k, cfg.z_min);
        for (p, d) in cloud.points.iter().zip(&dets) {
            let (s, c) = d.theta_a.sin_cos();
            let cross = p.x * s - p.y * c;
            assert!(cross.abs() < 1e-12 * p.norm().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn filter_cardinality(row in proptest::collection::vec(0u8..150, 1..120), k in 1usize..20) {
            let values: Vec<f32> = row.iter().map(|v| f32::from(*v)).collect();
            let scan = one_row(&values);
            let dets = k_strongest_filter(&scan, k, 60.0);
            prop_assert!(dets.len() <= k);
            let kept: Vec<usize> = dets.iter().map(|d| d.range_index).collect();
            let weakest_kept = dets.iter().map(|d| d.intensity).fold(f32::INFINITY, f32::min);
            for d in &dets {
                prop_assert!(f64::from(d.intensity) > 60.0);
            }
            for (idx, v) in values.iter().enumerate() {
                if !kept.contains(&idx) && !dets.is_empty() {
                    prop_assert!(*v <= weakest_kept);
                }
            }
        }
    }
}
