//! Robust point-to-distribution registration of surface-point sets.
//!
//! The cost of aligning a live set against one target set at pose `x` is
//!
//! ```text
//! f(x) = Σ_{(i,j)} w_ij · L(g_ij(x)),   L(s) = c² ln(1 + s / c²)
//! g_ij(x) = eᵀ S⁻¹ e,  e = R(θ) μ_i + t − μ_j,  S = Σ_j + R Σ_i Rᵀ + εI
//! w_ij = (n_i · n_j)²
//! ```
//!
//! and the total cost sums `f` over all targets. It is minimized with
//! Levenberg-Marquardt on the iteratively reweighted normal equations, with
//! nearest-neighbour correspondences recomputed after every accepted step.
//! Steps are parametrized in the body frame (`x ← x ⊕ δ`), which makes the
//! solver equivariant under a rigid change of the world frame.

use std::io::Write;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::geometry::{rotation, Pose2};
use crate::surface_points::{SurfacePoint, SurfacePointSet};

/// Extra isotropic term added to the combined covariance.
pub const RESIDUAL_REGULARIZATION: f64 = 1e-6;
/// Largest acceptable condition number of the combined covariance.
pub const MAX_CONDITION: f64 = 1e12;
/// Below this many correspondences at the initial guess registration refuses to run.
pub const MIN_CORRESPONDENCES: usize = 10;

const INITIAL_LAMBDA: f64 = 1e-4;
const LAMBDA_FACTOR: f64 = 10.0;
const MAX_LAMBDA: f64 = 1e12;
const DIVERGENCE_ESCALATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistrationError {
    #[error("no target sets given")]
    NoTargets,
    #[error("only {found} correspondences at the initial guess (need {required})")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("cost kept rising through {escalations} damping escalations after {iterations} iterations")]
    Diverged { iterations: usize, escalations: usize },
    #[error("combined covariance is numerically singular (condition number {condition:.3e})")]
    DegenerateCovariance { condition: f64 },
}

/// A live/target surface-point pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src_index: usize,
    pub dst_index: usize,
    /// Which target set `dst_index` refers to.
    pub dst_set: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost at the start of the iteration under the association in force.
    pub cost: f64,
    pub trial_cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub n_correspondences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub pose: Pose2,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    pub n_correspondences: usize,
    pub trace: Vec<IterationRecord>,
}

impl RegistrationResult {
    /// Writes the per-iteration trace as CSV rows prefixed with `frame`.
    pub fn write_trace_csv<W: Write>(&self, frame: usize, mut out: W) -> std::io::Result<()> {
        for r in &self.trace {
            writeln!(
                out,
                "{frame},{},{:.12e},{:.12e},{:.3e},{:.6e},{},{}",
                r.iteration,
                r.cost,
                r.trial_cost,
                r.lambda,
                r.step_norm,
                u8::from(r.accepted),
                r.n_correspondences
            )?;
        }
        Ok(())
    }

    pub const TRACE_CSV_HEADER: &'static str =
        "frame,iteration,cost,trial_cost,lambda,step_norm,accepted,n_correspondences";
}

/// Similarity of two unit normals, `(n_live · n_target)²`.
pub fn normal_weight(n_live: &Vector2<f64>, n_target: &Vector2<f64>) -> f64 {
    let d = n_live.dot(n_target);
    (d * d).clamp(0.0, 1.0)
}

pub fn cauchy_loss(s: f64, c: f64) -> f64 {
    let c2 = c * c;
    c2 * (s / c2).ln_1p()
}

/// Derivative of [`cauchy_loss`] with respect to `s`.
pub fn cauchy_weight(s: f64, c: f64) -> f64 {
    let c2 = c * c;
    c2 / (c2 + s)
}

fn combined_covariance(target: &SurfacePoint, live_cov: &Matrix2<f64>, rot: &Matrix2<f64>) -> Matrix2<f64> {
    let mut s = target.covariance + rot * live_cov * rot.transpose();
    s[(0, 0)] += RESIDUAL_REGULARIZATION;
    s[(1, 1)] += RESIDUAL_REGULARIZATION;
    s
}

fn condition_number(s: &Matrix2<f64>) -> f64 {
    let half_trace = 0.5 * (s[(0, 0)] + s[(1, 1)]);
    let b = 0.5 * (s[(0, 1)] + s[(1, 0)]);
    let radius = (0.25 * (s[(0, 0)] - s[(1, 1)]).powi(2) + b * b).sqrt();
    let lo = half_trace - radius;
    let hi = half_trace + radius;
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn inverse2(s: &Matrix2<f64>) -> Matrix2<f64> {
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    Matrix2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]) / det
}

/// Squared Mahalanobis distance of the transformed live mean to the target distribution.
pub fn p2d_residual(target: &SurfacePoint, live: &SurfacePoint, pose: &Pose2) -> Result<f64, RegistrationError> {
    let rot = pose.rotation();
    let e = pose.transform_point(&live.mean) - target.mean;
    let s = combined_covariance(target, &live.covariance, &rot);
    let condition = condition_number(&s);
    if condition > MAX_CONDITION || !condition.is_finite() {
        return Err(RegistrationError::DegenerateCovariance { condition });
    }
    Ok(e.dot(&(inverse2(&s) * e)))
}

/// Uniform-grid index over the means of a target set. Cells are at least
/// `r_max` wide, so a query only visits its own and the eight adjacent cells.
pub struct TargetIndex<'a> {
    set: &'a SurfacePointSet,
    r2: f64,
    cell: f64,
    origin: (i64, i64),
    dims: (usize, usize),
    /// Offsets into `items` per cell, row-major in x.
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'a> TargetIndex<'a> {
    pub fn new(set: &'a SurfacePointSet, r_max: f64) -> Self {
        assert!(r_max > 0.0, "r_max must be positive");
        let finite: Vec<usize> = (0..set.points.len())
            .filter(|&j| set.points[j].mean.iter().all(|v| v.is_finite()))
            .collect();
        // widen the cells when the extent would make the grid much larger than the set
        let limit = 4 * finite.len() + 64;
        let mut cell = r_max;
        let (origin, dims) = loop {
            let keys = finite.iter().map(|&j| Self::key(&set.points[j].mean, cell));
            let (lo, hi) = keys.fold(((i64::MAX, i64::MAX), (i64::MIN, i64::MIN)), |(lo, hi), k| {
                ((lo.0.min(k.0), lo.1.min(k.1)), (hi.0.max(k.0), hi.1.max(k.1)))
            });
            if finite.is_empty() {
                break ((0, 0), (0, 0));
            }
            let nx = (hi.0 as i128 - lo.0 as i128 + 1) as u128;
            let ny = (hi.1 as i128 - lo.1 as i128 + 1) as u128;
            if nx * ny <= limit as u128 {
                break (lo, (nx as usize, ny as usize));
            }
            cell *= 2.0;
        };
        let n_cells = dims.0 * dims.1;
        let cell_of = |j: usize| {
            let k = Self::key(&set.points[j].mean, cell);
            (k.0 - origin.0) as usize * dims.1 + (k.1 - origin.1) as usize
        };
        let mut starts = vec![0u32; n_cells + 1];
        for &j in &finite {
            starts[cell_of(j) + 1] += 1;
        }
        for c in 0..n_cells {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut items = vec![0u32; finite.len()];
        for &j in &finite {
            let c = cell_of(j);
            items[fill[c] as usize] = j as u32;
            fill[c] += 1;
        }
        Self {
            set,
            r2: r_max * r_max,
            cell,
            origin,
            dims,
            starts,
            items,
        }
    }

    fn key(p: &Vector2<f64>, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Nearest mean within `r_max` of `q`; ties go to the lower index.
    pub fn nearest(&self, q: &Vector2<f64>) -> Option<usize> {
        if !(q.x.is_finite() && q.y.is_finite()) || self.items.is_empty() {
            return None;
        }
        let (kx, ky) = Self::key(q, self.cell);
        let cx = kx as i128 - self.origin.0 as i128;
        let cy = ky as i128 - self.origin.1 as i128;
        let (nx, ny) = (self.dims.0 as i128, self.dims.1 as i128);
        let mut best: Option<(f64, usize)> = None;
        for x in (cx - 1).max(0)..=(cx + 1).min(nx - 1) {
            let (y0, y1) = ((cy - 1).max(0), (cy + 1).min(ny - 1));
            if y0 > y1 {
                continue;
            }
            let row = x as usize * self.dims.1;
            let lo = self.starts[row + y0 as usize] as usize;
            let hi = self.starts[row + y1 as usize + 1] as usize;
            for &j in &self.items[lo..hi] {
                let j = j as usize;
                let d2 = (self.set.points[j].mean - q).norm_squared();
                if d2 > self.r2 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bj)) => d2 < bd || (d2 == bd && j < bj),
                };
                if better {
                    best = Some((d2, j));
                }
            }
        }
        best.map(|(_, j)| j)
    }
}

fn associate(
    live: &SurfacePointSet,
    index: &TargetIndex<'_>,
    dst_set: usize,
    pose: &Pose2,
    out: &mut Vec<Correspondence>,
) {
    let rot = pose.rotation();
    for (i, sp) in live.points.iter().enumerate() {
        let q = pose.transform_point(&sp.mean);
        if let Some(j) = index.nearest(&q) {
            out.push(Correspondence {
                src_index: i,
                dst_index: j,
                dst_set,
                weight: normal_weight(&(rot * sp.normal), &index.set.points[j].normal),
            });
        }
    }
}

/// Nearest-neighbour correspondences of `live` (moved by `pose`) into `target`.
pub fn find_correspondences(
    live: &SurfacePointSet,
    target: &SurfacePointSet,
    pose: &Pose2,
    r_max: f64,
) -> Vec<Correspondence> {
    let index = TargetIndex::new(target, r_max);
    let mut out = Vec::new();
    associate(live, &index, 0, pose, &mut out);
    out
}

/// The registration objective with a frozen association.
pub struct FixedAssociation<'a> {
    live: &'a SurfacePointSet,
    targets: &'a [SurfacePointSet],
    correspondences: Vec<Correspondence>,
    cauchy_c: f64,
}

impl<'a> FixedAssociation<'a> {
    pub fn new(
        live: &'a SurfacePointSet,
        targets: &'a [SurfacePointSet],
        correspondences: Vec<Correspondence>,
        cauchy_c: f64,
    ) -> Self {
        Self {
            live,
            targets,
            correspondences,
            cauchy_c,
        }
    }

    /// Associates at `pose` against every target.
    pub fn at_pose(
        live: &'a SurfacePointSet,
        targets: &'a [SurfacePointSet],
        pose: &Pose2,
        cfg: &PipelineConfig,
    ) -> Self {
        let r_max = cfg.correspondence_radius();
        let mut correspondences = Vec::new();
        for (k, target) in targets.iter().enumerate() {
            let index = TargetIndex::new(target, r_max);
            associate(live, &index, k, pose, &mut correspondences);
        }
        Self::new(live, targets, correspondences, cfg.cauchy_c)
    }

    pub fn correspondences(&self) -> &[Correspondence] {
        &self.correspondences
    }

    fn pair(&self, c: &Correspondence) -> (&SurfacePoint, &SurfacePoint) {
        (
            &self.live.points[c.src_index],
            &self.targets[c.dst_set].points[c.dst_index],
        )
    }

    pub fn cost(&self, pose: &Pose2) -> f64 {
        let rot = pose.rotation();
        let t = pose.translation();
        self.correspondences
            .iter()
            .map(|c| {
                let (l, m) = self.pair(c);
                let e = rot * l.mean + t - m.mean;
                let s = combined_covariance(m, &l.covariance, &rot);
                c.weight * cauchy_loss(e.dot(&(inverse2(&s) * e)), self.cauchy_c)
            })
            .sum()
    }

    /// Exact gradient and Gauss-Newton Hessian with respect to the global
    /// parameters `(x, y, θ)`.
    pub fn linearize(&self, pose: &Pose2) -> (Vector3<f64>, Matrix3<f64>) {
        let rot = pose.rotation();
        let drot = rotation_derivative(pose.theta);
        let t = pose.translation();
        let mut grad = Vector3::zeros();
        let mut hess = Matrix3::zeros();
        for c in &self.correspondences {
            if c.weight == 0.0 {
                continue;
            }
            let (l, m) = self.pair(c);
            let e = rot * l.mean + t - m.mean;
            let s = combined_covariance(m, &l.covariance, &rot);
            let s_inv = inverse2(&s);
            let u = s_inv * e;
            let r = e.dot(&u);
            let scale = c.weight * cauchy_weight(r, self.cauchy_c);

            let de_dtheta = drot * l.mean;
            let a = drot * l.covariance * rot.transpose();
            let dr_dtheta = 2.0 * u.dot(&de_dtheta) - 2.0 * u.dot(&(a * u));
            grad += scale * Vector3::new(2.0 * u.x, 2.0 * u.y, dr_dtheta);

            // J = [I | de/dθ]; H += scale · 2 Jᵀ S⁻¹ J
            let sj = s_inv * de_dtheta;
            let block = Matrix3::new(
                s_inv[(0, 0)],
                s_inv[(0, 1)],
                sj.x,
                s_inv[(1, 0)],
                s_inv[(1, 1)],
                sj.y,
                sj.x,
                sj.y,
                de_dtheta.dot(&sj),
            );
            hess += (2.0 * scale) * block;
        }
        (grad, hess)
    }

    pub fn gradient(&self, pose: &Pose2) -> Vector3<f64> {
        self.linearize(pose).0
    }
}

fn rotation_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Total robust cost of `live` against one target at `pose`.
pub fn scan_to_keyframe_cost(
    target: &SurfacePointSet,
    live: &SurfacePointSet,
    pose: &Pose2,
    cfg: &PipelineConfig,
) -> f64 {
    let targets = std::slice::from_ref(target);
    FixedAssociation::at_pose(live, targets, pose, cfg).cost(pose)
}

/// Aligns `live` to the union of `targets`, starting from `init`.
///
/// Returns the pose that maps live coordinates into the targets' frame.
pub fn register(
    live: &SurfacePointSet,
    targets: &[SurfacePointSet],
    init: &Pose2,
    cfg: &PipelineConfig,
) -> Result<RegistrationResult, RegistrationError> {
    if targets.is_empty() {
        return Err(RegistrationError::NoTargets);
    }
    let r_max = cfg.correspondence_radius();
    let indices: Vec<TargetIndex<'_>> = targets.iter().map(|t| TargetIndex::new(t, r_max)).collect();
    let build = |pose: &Pose2| {
        let mut corr = Vec::new();
        for (k, index) in indices.iter().enumerate() {
            associate(live, index, k, pose, &mut corr);
        }
        FixedAssociation::new(live, targets, corr, cfg.cauchy_c)
    };

    let mut pose = *init;
    let mut problem = build(&pose);
    let found = problem.correspondences.len();
    if found < MIN_CORRESPONDENCES {
        return Err(RegistrationError::InsufficientCorrespondences {
            found,
            required: MIN_CORRESPONDENCES,
        });
    }
    for c in &problem.correspondences {
        let (l, m) = problem.pair(c);
        let s = combined_covariance(m, &l.covariance, &pose.rotation());
        let condition = condition_number(&s);
        if condition > MAX_CONDITION {
            return Err(RegistrationError::DegenerateCovariance { condition });
        }
    }

    let mut cost = problem.cost(&pose);
    let mut lambda = INITIAL_LAMBDA;
    let mut accepted_poses = vec![pose];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut rising = 0usize;
    let mut last_rejected: Option<f64> = None;

    while iterations < cfg.max_iters {
        iterations += 1;
        let (grad, hess) = problem.linearize(&pose);
        // body-frame parametrization: global = blockdiag(R, 1) · local
        let rot = pose.rotation();
        let mut m = Matrix3::identity();
        m.fixed_view_mut::<2, 2>(0, 0).copy_from(&rot);
        let g_local = m.transpose() * grad;
        let h_local = m.transpose() * hess * m;

        let mut damped = h_local;
        for d in 0..3 {
            damped[(d, d)] += lambda * h_local[(d, d)].max(1e-12);
        }
        let step = damped
            .cholesky()
            .map(|ch| -ch.solve(&g_local))
            .filter(|s| s.iter().all(|v| v.is_finite()));

        let Some(step) = step else {
            trace.push(IterationRecord {
                iteration: iterations,
                cost,
                trial_cost: f64::NAN,
                lambda,
                step_norm: f64::NAN,
                accepted: false,
                n_correspondences: problem.correspondences.len(),
            });
            lambda *= LAMBDA_FACTOR;
            if lambda > MAX_LAMBDA {
                break;
            }
            continue;
        };
        let step_norm = step.norm();
        if step_norm < cfg.conv_tol {
            trace.push(IterationRecord {
                iteration: iterations,
                cost,
                trial_cost: cost,
                lambda,
                step_norm,
                accepted: false,
                n_correspondences: problem.correspondences.len(),
            });
            converged = true;
            break;
        }
        let trial = pose.compose(&Pose2::new(step.x, step.y, step.z));
        let trial_cost = problem.cost(&trial);
        let accepted = trial_cost < cost;
        trace.push(IterationRecord {
            iteration: iterations,
            cost,
            trial_cost,
            lambda,
            step_norm,
            accepted,
            n_correspondences: problem.correspondences.len(),
        });
        if accepted {
            pose = trial;
            accepted_poses.push(pose);
            lambda = (lambda / LAMBDA_FACTOR).max(1e-12);
            rising = 0;
            last_rejected = None;
            problem = build(&pose);
            cost = problem.cost(&pose);
        } else {
            lambda *= LAMBDA_FACTOR;
            rising = match last_rejected {
                Some(prev) if trial_cost > prev => rising + 1,
                _ => 1,
            };
            last_rejected = Some(trial_cost);
            if rising >= DIVERGENCE_ESCALATIONS || !trial_cost.is_finite() && rising >= 1 && lambda > MAX_LAMBDA {
                return Err(RegistrationError::Diverged {
                    iterations,
                    escalations: rising,
                });
            }
            if lambda > MAX_LAMBDA {
                // no descent direction left at any damping: stationary
                converged = true;
                break;
            }
        }
    }

    // pick the lowest-cost accepted iterate under the final association
    let mut best = (problem.cost(&pose), pose);
    for candidate in accepted_poses.iter().rev().skip(1) {
        let c = problem.cost(candidate);
        if c < best.0 {
            best = (c, *candidate);
        }
    }
    Ok(RegistrationResult {
        pose: best.1,
        iterations,
        final_cost: best.0,
        converged,
        n_correspondences: problem.correspondences.len(),
        trace,
    })
}

/// Rotation matrix helper re-exported for callers building covariances.
pub fn rotation_of(theta: f64) -> Matrix2<f64> {
    rotation(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface_points::transform_surface_points;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sp(mean: (f64, f64), normal_angle: f64, cov: Matrix2<f64>) -> SurfacePoint {
        SurfacePoint {
            mean: Vector2::new(mean.0, mean.1),
            normal: Vector2::new(normal_angle.cos(), normal_angle.sin()),
            covariance: cov,
            n_samples: 8,
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> SurfacePointSet {
        let points = (0..n)
            .map(|_| {
                let angle: f64 = rng.random_range(-PI..PI);
                let major: f64 = rng.random_range(0.05..1.0);
                let minor: f64 = rng.random_range(1e-4..0.01);
                let r = rotation(angle);
                let cov = r * Matrix2::new(major, 0.0, 0.0, minor) * r.transpose();
                sp(
                    (rng.random_range(-extent..extent), rng.random_range(-extent..extent)),
                    angle + PI / 2.0,
                    cov,
                )
            })
            .collect();
        SurfacePointSet {
            points,
            origin_pose: Pose2::identity(),
        }
    }

    #[test]
    fn normal_weight_cases() {
        let a = Vector2::new(1.0, 0.0);
        assert_eq!(normal_weight(&a, &a), 1.0);
        assert_eq!(normal_weight(&a, &Vector2::new(0.0, 1.0)), 0.0);
        let diag = Vector2::new(1.0, 1.0).normalize();
        assert!((normal_weight(&a, &diag) - 0.5).abs() < 1e-15);
        assert_eq!(normal_weight(&a, &-a), 1.0);
    }

    #[test]
    fn p2d_residual_cases() {
        let cov = Matrix2::new(0.3, 0.1, 0.1, 0.2);
        let a = sp((1.0, 2.0), 0.0, cov);
        assert_eq!(p2d_residual(&a, &a, &Pose2::identity()).unwrap(), 0.0);

        let sigma2 = 0.04;
        let iso = Matrix2::identity() * sigma2;
        let target = sp((0.0, 0.0), 0.0, iso);
        let live = sp((0.3, 0.4), 0.0, iso);
        let expected = 0.25 / (2.0 * sigma2 + 1e-6);
        assert!((p2d_residual(&target, &live, &Pose2::identity()).unwrap() - expected).abs() < 1e-12);

        let target = sp((0.2, -0.1), 0.0, Matrix2::new(0.5, 0.2, 0.2, 0.1));
        let live = sp((1.0, 0.5), 0.0, Matrix2::new(0.05, -0.01, -0.01, 0.3));
        let pose = Pose2::new(0.3, -0.2, 0.4);
        // explicit solve of S z = e with the LU solver of nalgebra
        let r = pose.rotation();
        let e = r * live.mean + pose.translation() - target.mean;
        let s = target.covariance + r * live.covariance * r.transpose() + Matrix2::identity() * 1e-6;
        let z = s.lu().solve(&e).unwrap();
        let oracle = e.dot(&z);
        assert!((p2d_residual(&target, &live, &pose).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn p2d_flags_degenerate_covariance() {
        let huge = Matrix2::new(1e7, 0.0, 0.0, 0.0);
        let a = sp((0.0, 0.0), 0.0, huge);
        let b = sp((0.0, 0.0), 0.0, Matrix2::zeros());
        assert!(matches!(
            p2d_residual(&a, &b, &Pose2::identity()),
            Err(RegistrationError::DegenerateCovariance { .. })
        ));
    }

    fn brute_force(live: &SurfacePointSet, target: &SurfacePointSet, pose: &Pose2, r_max: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, l) in live.points.iter().enumerate() {
            let q = pose.transform_point(&l.mean);
            let mut best: Option<(f64, usize)> = None;
            for (j, m) in target.points.iter().enumerate() {
                let d = (m.mean - q).norm_squared();
                if d <= r_max * r_max && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            if let Some((_, j)) = best {
                out.push((i, j));
            }
        }
        out
    }

    #[test]
    fn correspondences_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let live = random_set(&mut rng, 80, 30.0);
            let target = random_set(&mut rng, 120, 30.0);
            let pose = Pose2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.3..0.3));
            let got: Vec<(usize, usize)> = find_correspondences(&live, &target, &pose, 4.0)
                .iter()
                .map(|c| (c.src_index, c.dst_index))
                .collect();
            assert_eq!(got, brute_force(&live, &target, &pose, 4.0));
        }
    }

    #[test]
    fn correspondences_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 40, 20.0);
        let corr = find_correspondences(&set, &set, &Pose2::identity(), 1.0);
        assert_eq!(corr.len(), 40);
        assert!(corr.iter().all(|c| c.src_index == c.dst_index && (c.weight - 1.0).abs() < 1e-12));
        let far = transform_surface_points(&set, &Pose2::new(500.0, 0.0, 0.0));
        assert!(find_correspondences(&set, &far, &Pose2::identity(), 6.0).is_empty());
    }

    #[test]
    fn cost_trivial_cases() {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_set(&mut rng, 30, 20.0);
        assert_eq!(scan_to_keyframe_cost(&set, &set, &Pose2::identity(), &cfg), 0.0);

        let cov = Matrix2::identity() * 0.01;
        let target = SurfacePointSet {
            points: vec![sp((0.0, 0.0), 0.0, cov)],
            origin_pose: Pose2::identity(),
        };
        let live = SurfacePointSet {
            points: vec![sp((0.1, 0.05), 0.0, cov)],
            origin_pose: Pose2::identity(),
        };
        let s = p2d_residual(&target.points[0], &live.points[0], &Pose2::identity()).unwrap();
        let c2 = cfg.cauchy_c * cfg.cauchy_c;
        let expected = c2 * (1.0 + s / c2).ln();
        assert!((scan_to_keyframe_cost(&target, &live, &Pose2::identity(), &cfg) - expected).abs() < 1e-15);
    }

    /// Straight-line recomputation of the cost sharing no code with the engine.
    fn reference_cost(target: &SurfacePointSet, live: &SurfacePointSet, pose: &Pose2, c: f64, r_max: f64) -> f64 {
        let (sn, cs) = pose.theta.sin_cos();
        let mut total = 0.0;
        for l in &live.points {
            let qx = cs * l.mean.x - sn * l.mean.y + pose.x;
            let qy = sn * l.mean.x + cs * l.mean.y + pose.y;
            let mut best: Option<(f64, usize)> = None;
            for (j, m) in target.points.iter().enumerate() {
                let d = (m.mean.x - qx).powi(2) + (m.mean.y - qy).powi(2);
                if d <= r_max * r_max && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            let Some((_, j)) = best else { continue };
            let m = &target.points[j];
            let nx = cs * l.normal.x - sn * l.normal.y;
            let ny = sn * l.normal.x + cs * l.normal.y;
            let w = (nx * m.normal.x + ny * m.normal.y).powi(2);
            let (a, b, d) = (l.covariance[(0, 0)], l.covariance[(0, 1)], l.covariance[(1, 1)]);
            // R Σ Rᵀ expanded by hand
            let rxx = cs * cs * a - 2.0 * cs * sn * b + sn * sn * d;
            let rxy = cs * sn * (a - d) + (cs * cs - sn * sn) * b;
            let ryy = sn * sn * a + 2.0 * cs * sn * b + cs * cs * d;
            let sxx = m.covariance[(0, 0)] + rxx + 1e-6;
            let sxy = m.covariance[(0, 1)] + rxy;
            let syy = m.covariance[(1, 1)] + ryy + 1e-6;
            let det = sxx * syy - sxy * sxy;
            let ex = qx - m.mean.x;
            let ey = qy - m.mean.y;
            let s = (syy * ex * ex - 2.0 * sxy * ex * ey + sxx * ey * ey) / det;
            total += w * c * c * (1.0 + s / (c * c)).ln();
        }
        total
    }

    #[test]
    fn cost_matches_reference_sum() {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let target = random_set(&mut rng, 60, 15.0);
            let live = random_set(&mut rng, 60, 15.0);
            let pose = Pose2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2));
            let got = scan_to_keyframe_cost(&target, &live, &pose, &cfg);
            let oracle = reference_cost(&target, &live, &pose, cfg.cauchy_c, cfg.correspondence_radius());
            assert!((got - oracle).abs() < 1e-10 * oracle.max(1.0), "{got} vs {oracle}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = PipelineConfig::default();
        for _ in 0..20 {
            let target = random_set(&mut rng, 50, 10.0);
            let live = random_set(&mut rng, 50, 10.0);
            let targets = vec![target];
            let pose = Pose2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
            let problem = FixedAssociation::at_pose(&live, &targets, &pose, &cfg);
            let g = problem.gradient(&pose);
            let h = 1e-6;
            let fd = Vector3::new(
                (problem.cost(&Pose2::new(pose.x + h, pose.y, pose.theta)) - problem.cost(&Pose2::new(pose.x - h, pose.y, pose.theta))) / (2.0 * h),
                (problem.cost(&Pose2::new(pose.x, pose.y + h, pose.theta)) - problem.cost(&Pose2::new(pose.x, pose.y - h, pose.theta))) / (2.0 * h),
                (problem.cost(&Pose2::new(pose.x, pose.y, pose.theta + h)) - problem.cost(&Pose2::new(pose.x, pose.y, pose.theta - h))) / (2.0 * h),
            );
            assert!((g - fd).norm() < 1e-4 * fd.norm(), "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn self_registration_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_set(&mut rng, 60, 20.0);
        let res = register(&set, std::slice::from_ref(&set), &Pose2::identity(), &PipelineConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.final_cost, 0.0);
        assert!(res.pose.x.abs() < 1e-9 && res.pose.y.abs() < 1e-9 && res.pose.theta.abs() < 1e-9);
    }

    #[test]
    fn errors_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 5, 5.0);
        let cfg = PipelineConfig::default();
        assert_eq!(
            register(&set, &[], &Pose2::identity(), &cfg).unwrap_err(),
            RegistrationError::NoTargets
        );
        assert!(matches!(
            register(&set, std::slice::from_ref(&set), &Pose2::identity(), &cfg),
            Err(RegistrationError::InsufficientCorrespondences { found: 5, required: 10 })
        ));
    }

    #[test]
    fn recovers_small_perturbation_on_random_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random_set(&mut rng, 150, 25.0);
        let perturbation = Pose2::new(0.3, -0.2, 0.03);
        let live = transform_surface_points(&target, &perturbation);
        let res = register(&live, std::slice::from_ref(&target), &Pose2::identity(), &PipelineConfig::default()).unwrap();
        let expected = perturbation.inverse();
        let err = expected.between(&res.pose);
        assert!(err.x.abs() < 1e-6 && err.y.abs() < 1e-6 && err.theta.abs() < 1e-6, "{err:?}");
    }
}
