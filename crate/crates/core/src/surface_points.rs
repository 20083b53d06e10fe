//! Sparse oriented surface points: the registration primitive.
//!
//! A cloud is binned into square cells. For each occupied cell the centroid
//! of its points seeds a radius search (radius = cell size); neighbourhoods
//! with enough samples yield a mean, a regularized covariance and the unit
//! normal along the covariance's minor axis, flipped to face the sensor.

use std::collections::HashMap;

use nalgebra::{Matrix2, Vector2};

use crate::geometry::Pose2;
use crate::preprocessing::PointCloud;

/// Added to every covariance diagonal.
pub const COVARIANCE_REGULARIZATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub mean: Vector2<f64>,
    pub normal: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub n_samples: usize,
}

/// Surface points of one scan or keyframe.
///
/// `origin_pose` is the pose of the extraction frame (the sensor) expressed
/// in the frame the points currently live in.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfacePointSet {
    pub points: Vec<SurfacePoint>,
    pub origin_pose: Pose2,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rigidly moves means, normals and covariances by `pose`.
    pub fn transformed(&self, pose: &Pose2) -> SurfacePointSet {
        transform_surface_points(self, pose)
    }
}

/// Eigen-decomposition of a symmetric 2x2 matrix.
///
/// Returns `(lambda_min, lambda_max, unit eigenvector of lambda_min)`.
pub fn symmetric_eigen(m: &Matrix2<f64>) -> (f64, f64, Vector2<f64>) {
    let a = m[(0, 0)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let c = m[(1, 1)];
    let half_trace = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l_min = half_trace - radius;
    let l_max = half_trace + radius;
    let v = if b.abs() <= f64::EPSILON * (a.abs() + c.abs()).max(f64::MIN_POSITIVE) {
        if a <= c {
            Vector2::new(1.0, 0.0)
        } else {
            Vector2::new(0.0, 1.0)
        }
    } else {
        // two algebraically equivalent choices; keep the better conditioned one
        let v1 = Vector2::new(l_min - c, b);
        let v2 = Vector2::new(b, l_min - a);
        if v1.norm_squared() >= v2.norm_squared() {
            v1.normalize()
        } else {
            v2.normalize()
        }
    };
    (l_min, l_max, v)
}

fn cell_of(p: &Vector2<f64>, grid_res: f64) -> (i64, i64) {
    ((p.x / grid_res).floor() as i64, (p.y / grid_res).floor() as i64)
}

/// Builds the surface-point set of `cloud`, expressed in the cloud's frame.
pub fn compute_surface_points(cloud: &PointCloud, grid_res: f64, min_points: usize) -> SurfacePointSet {
    assert!(grid_res > 0.0, "grid_res must be positive");
    assert!(min_points >= 3, "min_points must be at least 3");

    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        cells.entry(cell_of(p, grid_res)).or_default().push(i);
    }
    let mut keys: Vec<(i64, i64)> = cells.keys().copied().collect();
    keys.sort_unstable();

    let radius_sq = grid_res * grid_res;
    let mut points = Vec::new();
    let mut neighbours: Vec<Vector2<f64>> = Vec::new();
    for key in keys {
        let members = &cells[&key];
        let seed = members
            .iter()
            .fold(Vector2::zeros(), |acc, &i| acc + cloud.points[i])
            / members.len() as f64;

        neighbours.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(idx) = cells.get(&(key.0 + dx, key.1 + dy)) {
                    neighbours.extend(
                        idx.iter()
                            .map(|&i| cloud.points[i])
                            .filter(|p| (p - seed).norm_squared() <= radius_sq),
                    );
                }
            }
        }
        if neighbours.len() < min_points {
            continue;
        }
        let n = neighbours.len() as f64;
        let mean = neighbours.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
        let mut cov = neighbours.iter().fold(Matrix2::zeros(), |acc, p| {
            let d = p - mean;
            acc + d * d.transpose()
        }) / (n - 1.0);
        cov[(0, 0)] += COVARIANCE_REGULARIZATION;
        cov[(1, 1)] += COVARIANCE_REGULARIZATION;
        let (_, _, mut normal) = symmetric_eigen(&cov);
        if normal.dot(&mean) > 0.0 {
            normal = -normal;
        }
        points.push(SurfacePoint {
            mean,
            normal,
            covariance: cov,
            n_samples: neighbours.len(),
        });
    }
    SurfacePointSet {
        points,
        origin_pose: Pose2::identity(),
    }
}

pub fn transform_surface_points(set: &SurfacePointSet, pose: &Pose2) -> SurfacePointSet {
    if *pose == Pose2::identity() {
        return set.clone();
    }
    let rot = pose.rotation();
    let points = set
        .points
        .iter()
        .map(|sp| SurfacePoint {
            mean: pose.transform_point(&sp.mean),
            normal: rot * sp.normal,
            covariance: rot * sp.covariance * rot.transpose(),
            n_samples: sp.n_samples,
        })
        .collect();
    SurfacePointSet {
        points,
        origin_pose: pose.compose(&set.origin_pose),
    }
}
