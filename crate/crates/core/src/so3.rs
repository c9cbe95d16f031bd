//! The rotation group SO(3) and its Lie algebra so(3).
//!
//! Rotations are stored as plain 3×3 matrices. The logarithm returns the
//! principal branch (angle in `[0, π]`); on the branch cut `tr(R) = −1` the
//! rotation axis is only defined up to sign and is fixed by a
//! [`BranchConvention`]. That convention is what makes the globally
//! stabilizing attitude controller discontinuous at 180° rotations.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on `‖RᵀR − I‖_F` and `|det R − 1|` when constructing a rotation.
pub const ORTHOGONALITY_TOL: f64 = 1e-9;

/// Tolerance on `‖S + Sᵀ‖_F` for skew-symmetric matrices.
pub const SKEW_TOL: f64 = 1e-12;

/// Below this angle `exp` and `log` switch to their Taylor forms.
pub const SMALL_ANGLE: f64 = 1e-8;

/// A rotation whose `sin θ` is below this value is treated as lying on the
/// branch cut: its skew part carries no usable sign information.
pub const BRANCH_CUT_TOL: f64 = 1e-10;

/// How the logarithm picks the axis sign for rotations by exactly π.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchConvention {
    /// The largest-magnitude axis component is made nonnegative.
    #[default]
    NonNegative,
    /// The largest-magnitude axis component is made nonpositive.
    NonPositive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let orthogonality = orthogonality_error(&m);
        let det = m.determinant();
        if !(orthogonality <= ORTHOGONALITY_TOL && (det - 1.0).abs() <= ORTHOGONALITY_TOL) {
            return Err(Error::NotRotation { orthogonality, det });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix already known to be a rotation (products and
    /// exponentials of rotations).
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn about_z(angle: f64) -> Self {
        exp_so3(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn from_row_major(values: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&values))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.0)
    }

    pub fn log(&self) -> AxisAngleVector {
        log_so3(self)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let (sin, cos) = sin_cos_of_angle(&self.0);
        sin.atan2(cos)
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

impl Mul<&Vector3<f64>> for &RotationMatrix {
    type Output = Vector3<f64>;

    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Serialize for RotationMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RotationMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = <[f64; 9]>::deserialize(deserializer)?;
        RotationMatrix::from_row_major(values).map_err(serde::de::Error::custom)
    }
}

/// A rotation vector on the principal branch, `‖v‖ ≤ π`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AxisAngleVector(Vector3<f64>);

impl AxisAngleVector {
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !(norm <= PI + 1e-12) {
            return Err(Error::OffBranch { norm });
        }
        Ok(Self(v))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn exp(&self) -> RotationMatrix {
        exp_so3(&self.0)
    }
}

impl From<AxisAngleVector> for Vector3<f64> {
    fn from(v: AxisAngleVector) -> Self {
        v.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewMatrix(Matrix3<f64>);

impl SkewMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let asymmetry = (m + m.transpose()).norm();
        if !(asymmetry <= SKEW_TOL) {
            return Err(Error::NotSkew { asymmetry });
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn vee(&self) -> Vector3<f64> {
        vee_unchecked(&self.0)
    }
}

/// The cross-product matrix: `hat(v)·b = v × b`.
pub fn hat(v: &Vector3<f64>) -> SkewMatrix {
    SkewMatrix(hat_matrix(v))
}

pub(crate) fn hat_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; fails if `S` is not skew-symmetric within [`SKEW_TOL`].
pub fn vee(s: &Matrix3<f64>) -> Result<Vector3<f64>> {
    SkewMatrix::new(*s).map(|s| s.vee())
}

/// Reads the axial vector of a matrix without checking skew-symmetry; only
/// the antisymmetric part contributes.
pub(crate) fn vee_unchecked(s: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (s[(2, 1)] - s[(1, 2)]),
        0.5 * (s[(0, 2)] - s[(2, 0)]),
        0.5 * (s[(1, 0)] - s[(0, 1)]),
    )
}

/// Rodrigues' formula. Accepts any vector, not only the principal branch.
pub fn exp_so3(v: &Vector3<f64>) -> RotationMatrix {
    let theta = v.norm();
    let k = hat_matrix(v);
    let k2 = k * k;
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    RotationMatrix(Matrix3::identity() + k * a + k2 * b)
}

/// Principal logarithm with the default branch convention.
pub fn log_so3(r: &RotationMatrix) -> AxisAngleVector {
    log_so3_with(r, BranchConvention::default())
}

pub fn log_so3_with(r: &RotationMatrix, convention: BranchConvention) -> AxisAngleVector {
    let m = &r.0;
    let axial = vee_unchecked(m); // sin θ · axis
    let (sin, cos) = sin_cos_of_angle(m);
    let theta = sin.atan2(cos);

    if theta < SMALL_ANGLE {
        return AxisAngleVector(axial * (1.0 + theta * theta / 6.0));
    }
    if cos > -0.5 {
        return AxisAngleVector(axial * (theta / sin));
    }

    // Near π the skew part vanishes; recover the axis from the symmetric
    // part, (R + Rᵀ)/2 = cos θ·I + (1 − cos θ)·a·aᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
    let j = (0..3)
        .max_by(|&i, &k| outer[(i, i)].total_cmp(&outer[(k, k)]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = outer.column(j) / outer[(j, j)].max(0.0).sqrt();
    axis /= axis.norm();

    if sin > BRANCH_CUT_TOL {
        if axis.dot(&axial) < 0.0 {
            axis = -axis;
        }
    } else {
        let lead = axis.iamax();
        let flip = match convention {
            BranchConvention::NonNegative => axis[lead] < 0.0,
            BranchConvention::NonPositive => axis[lead] > 0.0,
        };
        if flip {
            axis = -axis;
        }
    }
    AxisAngleVector(axis * theta)
}

/// Angular distance `‖log(R1ᵀR2)‖ ∈ [0, π]`.
pub fn geodesic_distance(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    RotationMatrix(r1.0.transpose() * r2.0).angle()
}

/// Nearest rotation in Frobenius norm (polar factor).
pub fn project_so3(a: &Matrix3<f64>) -> Result<RotationMatrix> {
    let det = a.determinant();
    if !(det > 0.0) {
        return Err(Error::Degenerate {
            reason: format!("determinant {det} is not positive"),
        });
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * f64::EPSILON * 16.0) {
        return Err(Error::Degenerate {
            reason: format!("rank deficient (singular values {smin:e} .. {smax:e})"),
        });
    }
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Degenerate {
            reason: "singular value decomposition failed".into(),
        });
    };
    Ok(RotationMatrix(u * v_t))
}

fn orthogonality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// `(sin θ, cos θ)` of a rotation matrix, sin from the skew part so that the
/// angle stays accurate near π.
fn sin_cos_of_angle(m: &Matrix3<f64>) -> (f64, f64) {
    let sin = vee_unchecked(m).norm();
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    (sin, cos)
}
