//! Rigid-transform algebra shared by every stage of the pipeline.
//!
//! Transforms use the column convention internally (`p' = R p + t`). Point
//! batches are stored one point per row, and [`apply_points`] is the thin
//! adapter for the row-batch shorthand `{[Y, 1] Tᵀ}[:, 1:3]`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Orthonormality tolerance for accepting a matrix as a rotation.
pub const ORTHO_TOL: f64 = 1e-9;
/// Near-misses up to this deviation are re-projected instead of rejected.
pub const REPROJECT_TOL: f64 = 1e-6;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// A 3×3 rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Mat3);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Mat3::identity())
    }

    /// Validates `m`, re-projecting it onto SO(3) when it misses by at most
    /// [`REPROJECT_TOL`].
    pub fn new(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let dev = orthonormal_deviation(&m);
        if dev <= ORTHO_TOL {
            Ok(Rotation3(m))
        } else if dev <= REPROJECT_TOL {
            procrustes_project(&m)
        } else {
            Err(Error::InvalidRotation(format!(
                "deviation {dev:e} from SO(3) exceeds {REPROJECT_TOL:e}"
            )))
        }
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Rotation3(exp_so3(&(axis * (angle / n))))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation3(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation3(self.0.transpose())
    }

    pub fn mul(&self, other: &Rotation3) -> Self {
        Rotation3(self.0 * other.0)
    }

    /// Geodesic angle between two rotations, in `[0, π]`.
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        geodesic_angle(&(self.0.transpose() * other.0))
    }

    /// Rotation vector (axis times angle).
    pub fn log(&self) -> Vec3 {
        log_so3(&self.0)
    }
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

fn orthonormal_deviation(m: &Mat3) -> f64 {
    let gram = m.transpose() * m - Mat3::identity();
    let ortho = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    ortho.max((m.determinant() - 1.0).abs())
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform3 {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl Transform3 {
    pub fn new(rotation: Rotation3, translation: Vec3) -> Self {
        Transform3 {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Transform3::new(Rotation3::identity(), t)
    }

    pub fn from_rotation(r: Rotation3) -> Self {
        Transform3::new(r, Vec3::zeros())
    }

    /// Parses a homogeneous matrix. The bottom row must be `(0, 0, 0, 1)`
    /// within [`ORTHO_TOL`]; the rotation block goes through [`Rotation3::new`].
    pub fn from_matrix(m: &Mat4) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
        if bottom.iter().any(|v| !(v.abs() <= ORTHO_TOL)) {
            return Err(Error::InvalidInput(format!(
                "homogeneous bottom row is ({}, {}, {}, {})",
                m[(3, 0)],
                m[(3, 1)],
                m[(3, 2)],
                m[(3, 3)]
            )));
        }
        let t = Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        let r = Rotation3::new(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Transform3::new(r, t))
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::InvalidInput(format!(
                "transform needs 16 values, got {}",
                v.len()
            )));
        }
        Transform3::from_matrix(&Mat4::from_row_slice(v))
    }

    pub fn to_matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = m[(r, c)];
            }
        }
        out
    }

    /// Matrix product `self · other`.
    pub fn compose(&self, other: &Transform3) -> Transform3 {
        Transform3 {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.rotation.matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform3 {
        let rt = self.rotation.transpose();
        Transform3 {
            translation: -(rt.matrix() * self.translation),
            rotation: rt,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix() * p + self.translation
    }

    /// Same rotation, translation multiplied by `s`.
    pub fn scale_translation(&self, s: f64) -> Transform3 {
        Transform3::new(self.rotation, self.translation * s)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRepr {
    matrix: Vec<f64>,
}

impl Serialize for Transform3 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr {
            matrix: self.to_row_major().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Transform3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        Transform3::from_row_major(&repr.matrix).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for a transform stored as a bare 16-element row-major array.
pub mod row_major {
    use super::Transform3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Transform3, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(t.to_row_major())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Transform3, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Transform3::from_row_major(&v).map_err(serde::de::Error::custom)
    }

    /// Same, for a list of transforms.
    pub mod list {
        use super::Transform3;
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(ts: &[Transform3], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(ts.len()))?;
            for t in ts {
                seq.serialize_element(&t.to_row_major())?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Transform3>, D::Error> {
            let v = Vec::<Vec<f64>>::deserialize(d)?;
            v.iter()
                .map(|m| Transform3::from_row_major(m).map_err(serde::de::Error::custom))
                .collect()
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "intrinsics need finite positive focal lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Intrinsics for a raster resampled by `factor` (pixel centers at integers).
    pub fn scaled(&self, factor: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
        }
    }
}

/// Row-batch of 3D points with optional per-point confidence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseCloud {
    pub points: Vec<Vec3>,
    pub confidence: Option<Vec<f64>>,
}

impl DenseCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let c = DenseCloud {
            points,
            confidence: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_confidence(points: Vec<Vec3>, confidence: Vec<f64>) -> Result<Self> {
        let c = DenseCloud {
            points,
            confidence: Some(confidence),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidInput("dense cloud is empty".into()));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        if let Some(c) = &self.confidence {
            if c.len() != self.points.len() {
                return Err(Error::SizeMismatch(format!(
                    "{} confidences for {} points",
                    c.len(),
                    self.points.len()
                )));
            }
            if c.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidInput("confidence must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Multiplies every coordinate by `s`.
    pub fn scaled(&self, s: f64) -> DenseCloud {
        DenseCloud {
            points: self.points.iter().map(|p| p * s).collect(),
            confidence: self.confidence.clone(),
        }
    }

    /// Every `step`-th point, starting at index 0.
    pub fn subsample(&self, step: usize) -> DenseCloud {
        let step = step.max(1);
        DenseCloud {
            points: self.points.iter().step_by(step).copied().collect(),
            confidence: self
                .confidence
                .as_ref()
                .map(|c| c.iter().step_by(step).copied().collect()),
        }
    }
}

/// `{[Y, 1] Tᵀ}[:, 1:3]` for a row-batch `Y`; confidences are carried through.
pub fn apply_points(cloud: &DenseCloud, t: &Transform3) -> DenseCloud {
    DenseCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        confidence: cloud.confidence.clone(),
    }
}

pub fn compose(a: &Transform3, b: &Transform3) -> Transform3 {
    a.compose(b)
}

/// Nearest rotation in Frobenius norm, via SVD with determinant correction.
pub fn procrustes_project(m: &Mat3) -> Result<Rotation3> {
    Ok(Rotation3(PolarFactor::new(m)?.rotation))
}

/// Orthogonal polar factor of a 3×3 matrix together with what is needed to
/// differentiate it.
pub(crate) struct PolarFactor {
    pub rotation: Mat3,
    v: Mat3,
    signed_sv: Vec3,
}

impl PolarFactor {
    pub fn new(m: &Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix".into()));
        }
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd computed u");
        let v_t = svd.v_t.expect("svd computed v_t");
        let sv = svd.singular_values;
        let mut sorted = [sv[0], sv[1], sv[2]];
        sorted.sort_by(|a, b| b.total_cmp(a));
        if !(sorted[1] > 1e-12 * sorted[0].max(f64::MIN_POSITIVE)) || sorted[0] == 0.0 {
            return Err(Error::NonProjectable(sorted));
        }
        let smallest = (0..3)
            .min_by(|&a, &b| sv[a].total_cmp(&sv[b]))
            .expect("three singular values");
        let mut d = Vec3::repeat(1.0);
        if (u * v_t).determinant() < 0.0 {
            d[smallest] = -1.0;
        }
        let rotation = u * Mat3::from_diagonal(&d) * v_t;
        Ok(PolarFactor {
            rotation,
            v: v_t.transpose(),
            signed_sv: sv.component_mul(&d),
        })
    }

    /// Directional derivative of the rotation factor along `dm`.
    pub fn tangent(&self, dm: &Mat3) -> Mat3 {
        let b = self.rotation.transpose() * dm - dm.transpose() * self.rotation;
        let bt = self.v.transpose() * b * self.v;
        let mut omega = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let denom = self.signed_sv[i] + self.signed_sv[j];
                    if denom.abs() > 1e-300 {
                        omega[(i, j)] = bt[(i, j)] / denom;
                    }
                }
            }
        }
        self.rotation * self.v * omega * self.v.transpose()
    }

    /// Adjoint of [`tangent`](Self::tangent): the gradient with respect to the
    /// input matrix of `⟨g, R⟩`.
    pub fn adjoint(&self, g: &Mat3) -> Mat3 {
        let gt = self.v.transpose() * self.rotation.transpose() * g * self.v;
        let mut w = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let denom = self.signed_sv[i] + self.signed_sv[j];
                    if denom.abs() > 1e-300 {
                        w[(i, j)] = gt[(i, j)] / denom;
                    }
                }
            }
        }
        let z = self.v * w * self.v.transpose();
        self.rotation * (z - z.transpose())
    }
}

/// Angle of a rotation matrix, computed with `atan2` for accuracy near 0 and π.
pub(crate) fn geodesic_angle(r: &Mat3) -> f64 {
    let c = 0.5 * (r.trace() - 1.0);
    let s = 0.5 * vee_skew(r).norm();
    s.atan2(c)
}

/// `vee(R − Rᵀ)`, which equals `2 sin θ · axis` for a rotation.
pub(crate) fn vee_skew(r: &Mat3) -> Vec3 {
    Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
}

/// `rot_weight · angle(Rₐᵀ R_b) + ‖tₐ − t_b‖`.
pub fn se3_distance(a: &Transform3, b: &Transform3, rot_weight: f64) -> f64 {
    rot_weight * a.rotation.angle_to(&b.rotation) + (a.translation - b.translation).norm()
}

pub(crate) fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub(crate) fn exp_so3(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-8 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + a * k + b * k * k
}

pub(crate) fn log_so3(r: &Mat3) -> Vec3 {
    let theta = geodesic_angle(r);
    let v = vee_skew(r);
    if theta < 1e-8 {
        return 0.5 * v;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near π the skew part vanishes; take the axis from the symmetric part.
        let sym = (r + Mat3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
            .expect("three columns");
        let mut axis = sym.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    v * (theta / (2.0 * theta.sin()))
}
