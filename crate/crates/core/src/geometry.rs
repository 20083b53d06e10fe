//! Planar rigid-body primitives shared by every stage of the pipeline.
//!
//! Poses are elements of SE(2) stored as `(x, y, theta)` with `theta` kept in
//! `(-pi, pi]`. Velocities are body-frame twists `(vx, vy, omega)`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut wrapped = theta.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped -= 2.0 * PI;
    }
    // rem_euclid can land exactly on -pi after the subtraction above
    if wrapped <= -PI {
        wrapped += 2.0 * PI;
    }
    wrapped
}

/// 2x2 rotation matrix for `theta`.
pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// A planar pose: translation in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        rotation(self.theta)
    }

    /// `self ⊕ other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Pose of `other` relative to `self`, i.e. `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(
            self.x + c * p.x - s * p.y,
            self.y + s * p.x + c * p.y,
        )
    }

    /// Translation distance and absolute rotation between `self` and `other`.
    pub fn log_delta(&self, other: &Pose2) -> (f64, f64) {
        let rel = self.between(other);
        (rel.x.hypot(rel.y), rel.theta.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// SE(2) exponential of the tangent vector `(tx, ty, phi)`.
    pub fn exp(tx: f64, ty: f64, phi: f64) -> Pose2 {
        let (a, b) = exp_coefficients(phi);
        // V = [[a, -b], [b, a]]
        Pose2::new(a * tx - b * ty, b * tx + a * ty, phi)
    }

    /// SE(2) logarithm: the tangent vector `(tx, ty, phi)` with `exp(log(p)) == p`.
    pub fn log(&self) -> (f64, f64, f64) {
        let phi = self.theta;
        let (a, b) = exp_coefficients(phi);
        let det = a * a + b * b;
        // V⁻¹ = [[a, b], [-b, a]] / det
        let tx = (a * self.x + b * self.y) / det;
        let ty = (-b * self.x + a * self.y) / det;
        (tx, ty, phi)
    }
}

/// `(sin(phi)/phi, (1 - cos(phi))/phi)` with series expansions near zero.
fn exp_coefficients(phi: f64) -> (f64, f64) {
    if phi.abs() < 1e-6 {
        let phi2 = phi * phi;
        (1.0 - phi2 / 6.0, phi / 2.0 - phi * phi2 / 24.0)
    } else {
        (phi.sin() / phi, (1.0 - phi.cos()) / phi)
    }
}

/// Body-frame velocity: longitudinal, lateral (m/s) and yaw rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl Velocity {
    pub fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub const fn zero() -> Self {
        Self {
            vx: 0.0,
            vy: 0.0,
            omega: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.vx == 0.0 && self.vy == 0.0 && self.omega == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.omega.is_finite()
    }

    /// Pose increment produced by holding this twist for `dt` seconds.
    pub fn integrate(&self, dt: f64) -> Pose2 {
        Pose2::exp(self.vx * dt, self.vy * dt, self.omega * dt)
    }

    /// Constant twist that carries `from` to `to` in `dt` seconds.
    pub fn from_increment(from: &Pose2, to: &Pose2, dt: f64) -> Velocity {
        let (tx, ty, phi) = from.between(to).log();
        Velocity::new(tx / dt, ty / dt, phi / dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn homogeneous(p: &Pose2) -> Matrix3<f64> {
        let (s, c) = p.theta.sin_cos();
        Matrix3::new(c, -s, p.x, s, c, p.y, 0.0, 0.0, 1.0)
    }

    fn from_homogeneous(m: &Matrix3<f64>) -> Pose2 {
        Pose2::new(m[(0, 2)], m[(1, 2)], m[(1, 0)].atan2(m[(0, 0)]))
    }

    fn assert_pose_eq(a: &Pose2, b: &Pose2, tol: f64) {
        assert!((a.x - b.x).abs() <= tol, "x: {a:?} vs {b:?}");
        assert!((a.y - b.y).abs() <= tol, "y: {a:?} vs {b:?}");
        assert!(wrap_angle(a.theta - b.theta).abs() <= tol, "theta: {a:?} vs {b:?}");
    }

    #[test]
    fn compose_identity_and_quarter_turn() {
        let p = Pose2::new(0.4, -1.2, 2.0);
        assert_eq!(Pose2::identity().compose(&p), p);
        let q = Pose2::new(1.0, 0.0, PI / 2.0).compose(&Pose2::new(1.0, 0.0, 0.0));
        assert_pose_eq(&q, &Pose2::new(1.0, 1.0, PI / 2.0), 1e-15);
    }

    #[test]
    fn compose_matches_matrix_product() {
        let a = Pose2::new(0.3, -0.2, 0.1);
        let b = Pose2::new(0.5, 0.4, -0.3);
        let oracle = from_homogeneous(&(homogeneous(&a) * homogeneous(&b)));
        assert_pose_eq(&a.compose(&b), &oracle, 1e-14);
    }

    #[test]
    fn inverse_cases() {
        assert_eq!(Pose2::identity().inverse(), Pose2::new(-0.0, 0.0, -0.0));
        assert_pose_eq(&Pose2::new(1.0, 0.0, 0.0).inverse(), &Pose2::new(-1.0, 0.0, 0.0), 0.0);
        let a = Pose2::new(0.3, -0.2, 0.1);
        let oracle = from_homogeneous(&homogeneous(&a).try_inverse().unwrap());
        assert_pose_eq(&a.inverse(), &oracle, 1e-14);
    }

    #[test]
    fn log_delta_cases() {
        let a = Pose2::new(1.0, 1.0, 0.2);
        assert_eq!(a.log_delta(&a), (0.0, 0.0));
        let (dt, dr) = Pose2::identity().log_delta(&Pose2::new(1.5, 0.0, 0.0));
        assert!((dt - 1.5).abs() < 1e-15 && dr == 0.0);
        let (dt, dr) = a.log_delta(&Pose2::new(2.0, 0.0, -0.1));
        assert!((dt - 2f64.sqrt()).abs() < 1e-12);
        assert!((dr - 0.3).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_boundaries() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5 - 4.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn exp_of_pure_translation_and_turn() {
        assert_pose_eq(&Pose2::exp(2.0, 0.0, 0.0), &Pose2::new(2.0, 0.0, 0.0), 1e-15);
        // quarter arc of radius 1
        let p = Pose2::exp(PI / 2.0, 0.0, PI / 2.0);
        assert_pose_eq(&p, &Pose2::new(1.0, 1.0, PI / 2.0), 1e-12);
    }

    fn pose_strategy() -> impl Strategy<Value = Pose2> {
        (-50.0..50.0f64, -50.0..50.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn group_laws(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let id = a.compose(&a.inverse());
            prop_assert!(id.x.abs() < 1e-12 && id.y.abs() < 1e-12 && id.theta.abs() < 1e-12);
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            prop_assert!((lhs.x - rhs.x).abs() < 1e-12);
            prop_assert!((lhs.y - rhs.y).abs() < 1e-12);
            prop_assert!(wrap_angle(lhs.theta - rhs.theta).abs() < 1e-12);
            prop_assert_eq!(Pose2::identity().compose(&a), a);
            let right = a.compose(&Pose2::identity());
            prop_assert!((right.x - a.x).abs() < 1e-12 && (right.y - a.y).abs() < 1e-12);
        }

        #[test]
        fn angles_stay_wrapped(poses in proptest::collection::vec(pose_strategy(), 1..30)) {
            let mut acc = Pose2::identity();
            for p in &poses {
                acc = acc.compose(p);
                prop_assert!(acc.theta.abs() <= PI);
                prop_assert!(acc.theta > -PI);
            }
        }

        #[test]
        fn exp_log_roundtrip(tx in -10.0..10.0f64, ty in -10.0..10.0f64, phi in -3.0..3.0f64) {
            let p = Pose2::exp(tx, ty, phi);
            let (a, b, c) = p.log();
            prop_assert!((a - tx).abs() < 1e-9 && (b - ty).abs() < 1e-9 && (c - phi).abs() < 1e-12);
        }
    }
}
