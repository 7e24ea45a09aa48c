//! Coordinate conventions and the bistatic measurement model.
//!
//! All angles are azimuths in radians, expressed in the local frame of the
//! entity that measures them: the angle of departure (AoD) relative to the
//! base-station heading and the angle of arrival (AoA) relative to the UE
//! heading. Ranges are in meters and include the UE clock bias `B`, so a path
//! of geometric length `d` is observed at range `d - B`.
//!
//! State vectors are laid out as `[x_ue, y_ue, heading_ue, bias, x_1, y_1, ...]`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distances below this are treated as coincident points.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

/// Number of UE state components (position, heading, bias).
pub const UE_DIM: usize = 4;

/// Reduces an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap(a))
}

/// Infallible variant of [`wrap_angle`]; non-finite input propagates as NaN.
#[inline]
pub(crate) fn wrap(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub position: Vector2<f64>,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            position: Vector2::new(x, y),
            heading: wrap(heading),
        }
    }
}

/// UE position, heading and clock bias (in meters, `B = c·b`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeState {
    pub position: Vector2<f64>,
    pub heading: f64,
    pub bias: f64,
}

impl UeState {
    pub fn new(x: f64, y: f64, heading: f64, bias: f64) -> Self {
        Self {
            position: Vector2::new(x, y),
            heading: wrap(heading),
            bias,
        }
    }

    pub fn from_pose(pose: &Pose2, bias: f64) -> Self {
        Self {
            position: pose.position,
            heading: pose.heading,
            bias,
        }
    }

    pub fn to_vector(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.position.x, self.position.y, self.heading, self.bias)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            position: Vector2::new(v[0], v[1]),
            heading: wrap(v[2]),
            bias: v[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: Vector2<f64>,
}

impl Landmark {
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            position: Vector2::new(x, y),
        }
    }
}

/// UE state stacked with the landmarks of every non-line-of-sight path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub ue: UeState,
    pub landmarks: Vec<Landmark>,
}

impl JointState {
    pub fn new(ue: UeState, landmarks: Vec<Landmark>) -> Self {
        Self { ue, landmarks }
    }

    pub fn dim(&self) -> usize {
        UE_DIM + 2 * self.landmarks.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.fixed_rows_mut::<4>(0).copy_from(&self.ue.to_vector());
        for (k, lm) in self.landmarks.iter().enumerate() {
            v[UE_DIM + 2 * k] = lm.position.x;
            v[UE_DIM + 2 * k + 1] = lm.position.y;
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() < UE_DIM || (v.len() - UE_DIM) % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "state vector length {} is not 4 + 2k",
                v.len()
            )));
        }
        let ue = UeState::from_slice(&v.as_slice()[..UE_DIM]);
        let landmarks = v.as_slice()[UE_DIM..]
            .chunks_exact(2)
            .map(|c| Landmark::new(c[0], c[1]))
            .collect();
        Ok(Self { ue, landmarks })
    }
}

/// Which propagation mechanism a measurement is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathKind {
    Los,
    /// Single bounce off the landmark with this index in [`JointState::landmarks`].
    Nlos(usize),
}

/// One channel-parameter observation `[range, aod, aoa]` with its noise covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Biased range `c·τ̂ᵇ` in meters.
    pub range: f64,
    pub aod: f64,
    pub aoa: f64,
    /// Covariance in (m², rad², rad²).
    pub covariance: Matrix3<f64>,
    /// Linear path power, used only for line-of-sight candidate selection.
    pub power: f64,
}

impl Measurement {
    pub fn new(range: f64, aod: f64, aoa: f64, covariance: Matrix3<f64>, power: f64) -> Self {
        Self {
            range,
            aod: wrap(aod),
            aoa: wrap(aoa),
            covariance,
            power,
        }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.range, self.aod, self.aoa)
    }

    /// Measurement minus prediction, with angle components wrapped.
    pub fn residual(&self, predicted: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.range - predicted[0],
            wrap(self.aod - predicted[1]),
            wrap(self.aoa - predicted[2]),
        )
    }
}

/// `diag([σ_range, σ_aod, σ_aoa]²)` with the angle deviations given in degrees.
pub fn diagonal_covariance(range_std_m: f64, aod_std_deg: f64, aoa_std_deg: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(
        range_std_m.powi(2),
        aod_std_deg.to_radians().powi(2),
        aoa_std_deg.to_radians().powi(2),
    ))
}

fn checked_norm(v: &Vector2<f64>, what: &'static str) -> Result<f64> {
    let n = v.norm();
    if !n.is_finite() {
        return Err(Error::NonFinite(what));
    }
    if n < DEGENERATE_DISTANCE {
        return Err(Error::DegenerateGeometry { what, length: n });
    }
    Ok(n)
}

/// Gradient of `atan2(v.y, v.x)` with respect to `v`.
#[inline]
fn bearing_gradient(v: &Vector2<f64>, norm2: f64) -> Vector2<f64> {
    Vector2::new(-v.y / norm2, v.x / norm2)
}

fn landmark_for(x: &JointState, kind: PathKind) -> Result<Option<&Landmark>> {
    match kind {
        PathKind::Los => Ok(None),
        PathKind::Nlos(k) => x.landmarks.get(k).map(Some).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "path refers to landmark {k} but the state holds {}",
                x.landmarks.len()
            ))
        }),
    }
}

/// Noise-free `[range, aod, aoa]` for a UE state and an optional reflecting landmark.
pub fn predict_path(bs: &Pose2, ue: &UeState, landmark: Option<&Landmark>) -> Result<Vector3<f64>> {
    let (d, first, second) = match landmark {
        None => {
            let delta = bs.position - ue.position;
            let d = checked_norm(&delta, "BS-UE leg")?;
            (d, delta, delta)
        }
        Some(m) => {
            let d1 = bs.position - m.position;
            let d2 = m.position - ue.position;
            let n1 = checked_norm(&d1, "BS-landmark leg")?;
            let n2 = checked_norm(&d2, "landmark-UE leg")?;
            (n1 + n2, d1, d2)
        }
    };
    Ok(Vector3::new(
        d - ue.bias,
        wrap((-first.y).atan2(-first.x) - bs.heading),
        wrap(second.y.atan2(second.x) - ue.heading),
    ))
}

pub fn predict_measurement(bs: &Pose2, x: &JointState, kind: PathKind) -> Result<Vector3<f64>> {
    predict_path(bs, &x.ue, landmark_for(x, kind)?)
}

/// Partial derivatives of [`predict_path`] with respect to the UE state and,
/// for a bounce path, the landmark position.
pub fn path_jacobian(
    bs: &Pose2,
    ue: &UeState,
    landmark: Option<&Landmark>,
) -> Result<(Matrix3x4<f64>, Option<Matrix3x2<f64>>)> {
    let mut j_ue = Matrix3x4::zeros();
    j_ue[(0, 3)] = -1.0;
    j_ue[(2, 2)] = -1.0;
    match landmark {
        None => {
            // v points from BS to UE; the AoD is its bearing.
            let v = ue.position - bs.position;
            let d = checked_norm(&v, "BS-UE leg")?;
            let d2 = d * d;
            let range_grad = v / d;
            let aod_grad = bearing_gradient(&v, d2);
            // AoA is the bearing of -v, whose derivative w.r.t. the UE is -∂bearing(-v).
            let aoa_grad = -bearing_gradient(&(-v), d2);
            for c in 0..2 {
                j_ue[(0, c)] = range_grad[c];
                j_ue[(1, c)] = aod_grad[c];
                j_ue[(2, c)] = aoa_grad[c];
            }
            Ok((j_ue, None))
        }
        Some(m) => {
            let out = m.position - bs.position;
            let back = m.position - ue.position;
            let n1 = checked_norm(&out, "BS-landmark leg")?;
            let n2 = checked_norm(&back, "landmark-UE leg")?;
            let aod_grad_m = bearing_gradient(&out, n1 * n1);
            let aoa_grad_m = bearing_gradient(&back, n2 * n2);
            let range_grad_m = out / n1 + back / n2;
            let mut j_m = Matrix3x2::zeros();
            for c in 0..2 {
                j_ue[(0, c)] = -back[c] / n2;
                j_ue[(2, c)] = -aoa_grad_m[c];
                j_m[(0, c)] = range_grad_m[c];
                j_m[(1, c)] = aod_grad_m[c];
                j_m[(2, c)] = aoa_grad_m[c];
            }
            Ok((j_ue, Some(j_m)))
        }
    }
}

/// Jacobian of [`predict_measurement`] over the full joint state (3 × dim).
pub fn jacobian_measurement(bs: &Pose2, x: &JointState, kind: PathKind) -> Result<DMatrix<f64>> {
    let landmark = landmark_for(x, kind)?;
    let (j_ue, j_m) = path_jacobian(bs, &x.ue, landmark)?;
    let mut h = DMatrix::zeros(3, x.dim());
    h.fixed_view_mut::<3, 4>(0, 0).copy_from(&j_ue);
    if let (PathKind::Nlos(k), Some(j_m)) = (kind, j_m) {
        h.fixed_view_mut::<3, 2>(0, UE_DIM + 2 * k).copy_from(&j_m);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn origin_bs() -> Pose2 {
        Pose2::new(0.0, 0.0, 0.0)
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!(close(wrap_angle(3.0 * PI).unwrap(), PI, 1e-12));
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn los_345_triangle() {
        let x = JointState::new(UeState::new(3.0, 4.0, 0.0, 0.0), vec![]);
        let z = predict_measurement(&origin_bs(), &x, PathKind::Los).unwrap();
        assert!(close(z[0], 5.0, 1e-12));
        assert!(close(z[1], 0.927_295_218, 1e-9));
        assert!(close(z[2], -2.214_297_436, 1e-9));
    }

    #[test]
    fn nlos_axis_aligned_legs() {
        let x = JointState::new(UeState::new(5.0, 5.0, 0.0, 0.0), vec![Landmark::new(0.0, 5.0)]);
        let z = predict_measurement(&origin_bs(), &x, PathKind::Nlos(0)).unwrap();
        assert!(close(z[0], 10.0, 1e-12));
        assert!(close(z[1], PI / 2.0, 1e-12));
        assert!(close(z[2], PI, 1e-12));
    }

    #[test]
    fn bias_only_moves_range() {
        let bs = Pose2::new(1.0, -2.0, 0.3);
        let a = JointState::new(UeState::new(4.0, 3.0, 1.0, 0.0), vec![Landmark::new(-3.0, 6.0)]);
        let mut b = a.clone();
        b.ue.bias = 2.0;
        for kind in [PathKind::Los, PathKind::Nlos(0)] {
            let za = predict_measurement(&bs, &a, kind).unwrap();
            let zb = predict_measurement(&bs, &b, kind).unwrap();
            assert!(close(zb[0] - za[0], -2.0, 1e-12));
            assert_eq!(za[1], zb[1]);
            assert_eq!(za[2], zb[2]);
        }
    }

    #[test]
    fn degenerate_geometry_is_an_error() {
        let x = JointState::new(UeState::new(3.0, 4.0, 0.0, 0.0), vec![Landmark::new(0.0, 0.0)]);
        assert!(matches!(
            predict_measurement(&origin_bs(), &x, PathKind::Nlos(0)),
            Err(Error::DegenerateGeometry { .. })
        ));
        assert!(jacobian_measurement(&origin_bs(), &x, PathKind::Nlos(0)).is_err());
        let coincident = JointState::new(UeState::new(0.0, 0.0, 0.0, 0.0), vec![]);
        assert!(predict_measurement(&origin_bs(), &coincident, PathKind::Los).is_err());
        assert!(predict_measurement(&origin_bs(), &coincident, PathKind::Nlos(3)).is_err());
    }

    #[test]
    fn jacobian_structural_entries() {
        let bs = Pose2::new(0.5, 0.5, -0.4);
        let x = JointState::new(
            UeState::new(4.0, 2.0, 0.7, 1.5),
            vec![Landmark::new(2.0, 8.0), Landmark::new(-5.0, 1.0)],
        );
        for kind in [PathKind::Los, PathKind::Nlos(0), PathKind::Nlos(1)] {
            let h = jacobian_measurement(&bs, &x, kind).unwrap();
            assert_eq!(h[(0, 3)], -1.0);
            assert_eq!(h[(2, 2)], -1.0);
            assert_eq!(h[(1, 2)], 0.0);
            assert_eq!(h[(0, 2)], 0.0);
            if let PathKind::Nlos(k) = kind {
                // columns of the other landmark are zero
                let other = 1 - k;
                for r in 0..3 {
                    assert_eq!(h[(r, 4 + 2 * other)], 0.0);
                    assert_eq!(h[(r, 5 + 2 * other)], 0.0);
                }
                // the UE position does not enter the AoD of a bounce path
                assert_eq!(h[(1, 0)], 0.0);
                assert_eq!(h[(1, 1)], 0.0);
            }
        }
    }

    fn state_strategy() -> impl Strategy<Value = (Pose2, JointState)> {
        (
            (-5.0..5.0f64, -5.0..5.0f64, -3.1..3.1f64),
            (-20.0..20.0f64, -20.0..20.0f64, -3.1..3.1f64, -10.0..10.0f64),
            proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 0..3),
        )
            .prop_map(|((bx, by, bh), (ux, uy, uh, ub), lms)| {
                (
                    Pose2::new(bx, by, bh),
                    JointState::new(
                        UeState::new(ux, uy, uh, ub),
                        lms.into_iter().map(|(x, y)| Landmark::new(x, y)).collect(),
                    ),
                )
            })
            .prop_filter("non-degenerate", |(bs, x)| {
                let far = |a: &Vector2<f64>, b: &Vector2<f64>| (a - b).norm() > 0.5;
                far(&bs.position, &x.ue.position)
                    && x.landmarks.iter().all(|m| {
                        far(&m.position, &bs.position) && far(&m.position, &x.ue.position)
                    })
            })
    }

    fn kinds(x: &JointState) -> Vec<PathKind> {
        std::iter::once(PathKind::Los)
            .chain((0..x.landmarks.len()).map(PathKind::Nlos))
            .collect()
    }

    proptest! {
        #[test]
        fn angles_stay_wrapped((bs, x) in state_strategy()) {
            for kind in kinds(&x) {
                let z = predict_measurement(&bs, &x, kind).unwrap();
                prop_assert!(z[1] > -PI && z[1] <= PI);
                prop_assert!(z[2] > -PI && z[2] <= PI);
            }
        }

        #[test]
        fn translation_equivariance((bs, x) in state_strategy(), tx in -50.0..50.0f64, ty in -50.0..50.0f64) {
            let t = Vector2::new(tx, ty);
            let mut bs2 = bs;
            bs2.position += t;
            let mut x2 = x.clone();
            x2.ue.position += t;
            for m in &mut x2.landmarks { m.position += t; }
            for kind in kinds(&x) {
                let a = predict_measurement(&bs, &x, kind).unwrap();
                let b = predict_measurement(&bs2, &x2, kind).unwrap();
                prop_assert!((a[0] - b[0]).abs() < 1e-9);
                prop_assert!(wrap(a[1] - b[1]).abs() < 1e-9);
                prop_assert!(wrap(a[2] - b[2]).abs() < 1e-9);
            }
        }

        #[test]
        fn rotation_equivariance((bs, x) in state_strategy(), gamma in -PI..PI) {
            let rot = nalgebra::Rotation2::new(gamma);
            let bs2 = Pose2 { position: rot * bs.position, heading: wrap(bs.heading + gamma) };
            let mut x2 = x.clone();
            x2.ue.position = rot * x.ue.position;
            x2.ue.heading = wrap(x.ue.heading + gamma);
            for m in &mut x2.landmarks { m.position = rot * m.position; }
            for kind in kinds(&x) {
                let a = predict_measurement(&bs, &x, kind).unwrap();
                let b = predict_measurement(&bs2, &x2, kind).unwrap();
                prop_assert!((a[0] - b[0]).abs() < 1e-9);
                prop_assert!(wrap(a[1] - b[1]).abs() < 1e-9);
                prop_assert!(wrap(a[2] - b[2]).abs() < 1e-9);
            }
        }

        #[test]
        fn jacobian_matches_central_differences((bs, x) in state_strategy()) {
            let v0 = x.to_vector();
            let step = 1e-6;
            for kind in kinds(&x) {
                let h = jacobian_measurement(&bs, &x, kind).unwrap();
                for c in 0..x.dim() {
                    let mut plus = v0.clone();
                    plus[c] += step;
                    let mut minus = v0.clone();
                    minus[c] -= step;
                    let zp = predict_measurement(&bs, &JointState::from_vector(&plus).unwrap(), kind).unwrap();
                    let zm = predict_measurement(&bs, &JointState::from_vector(&minus).unwrap(), kind).unwrap();
                    for r in 0..3 {
                        let diff = if r == 0 { zp[r] - zm[r] } else { wrap(zp[r] - zm[r]) };
                        let fd = diff / (2.0 * step);
                        let err = (fd - h[(r, c)]).abs() / h[(r, c)].abs().max(1.0);
                        prop_assert!(err < 1e-5, "row {} col {}: fd {} analytic {}", r, c, fd, h[(r, c)]);
                    }
                }
            }
        }
    }
}
