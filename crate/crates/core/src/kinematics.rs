//! Serial-chain kinematics and the mappings between robot configurations and
//! points on the held object.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{
    exp_so3, log_so3, procrustes_project, row_major, se3_distance, Mat3, Rotation3, Transform3,
    Vec3,
};

const AXIS_TOL: f64 = 1e-9;
pub const MAX_JOINTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    #[serde(rename = "type")]
    pub joint_type: JointType,
    #[serde(with = "row_major")]
    pub parent_offset: Transform3,
    pub axis: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<[f64; 2]>,
}

impl Joint {
    pub fn revolute(parent_offset: Transform3, axis: [f64; 3]) -> Self {
        Joint {
            joint_type: JointType::Revolute,
            parent_offset,
            axis,
            limits: None,
        }
    }

    pub fn prismatic(parent_offset: Transform3, axis: [f64; 3]) -> Self {
        Joint {
            joint_type: JointType::Prismatic,
            parent_offset,
            axis,
            limits: None,
        }
    }

    pub fn with_limits(mut self, lo: f64, hi: f64) -> Self {
        self.limits = Some([lo, hi]);
        self
    }

    fn axis_vec(&self) -> Vec3 {
        Vec3::from(self.axis)
    }

    fn motion(&self, q: f64) -> Transform3 {
        match self.joint_type {
            JointType::Revolute => {
                Transform3::from_rotation(Rotation3::from_axis_angle(&self.axis_vec(), q))
            }
            JointType::Prismatic => Transform3::from_translation(self.axis_vec() * q),
        }
    }

    fn clamp(&self, q: f64) -> f64 {
        match self.limits {
            Some([lo, hi]) => q.clamp(lo, hi),
            None => q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub joints: Vec<Joint>,
    #[serde(with = "row_major")]
    pub tip_offset: Transform3,
}

impl ChainSpec {
    pub fn new(joints: Vec<Joint>, tip_offset: Transform3) -> Result<Self> {
        let chain = ChainSpec { joints, tip_offset };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() || self.joints.len() > MAX_JOINTS {
            return Err(Error::InvalidInput(format!(
                "chain must have 1 to {MAX_JOINTS} joints, got {}",
                self.joints.len()
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let norm = j.axis_vec().norm();
            if (norm - 1.0).abs() > AXIS_TOL {
                return Err(Error::InvalidInput(format!(
                    "joint {i} axis has norm {norm}"
                )));
            }
            if let Some([lo, hi]) = j.limits {
                if !(lo <= hi) {
                    return Err(Error::InvalidInput(format!(
                        "joint {i} limits [{lo}, {hi}] are empty"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn check(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::SizeMismatch(format!(
                "configuration has {} values, chain has {} joints",
                q.len(),
                self.dof()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite configuration".into()));
        }
        Ok(())
    }

    /// Whether every joint value lies within its limits.
    pub fn within_limits(&self, q: &[f64]) -> bool {
        self.joints.iter().zip(q).all(|(j, &v)| j.clamp(v) == v)
    }

    /// Sum of all offset lengths; no tip position lies farther from the base.
    pub fn reach(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| {
                let slide = match (j.joint_type, j.limits) {
                    (JointType::Prismatic, Some([lo, hi])) => lo.abs().max(hi.abs()),
                    (JointType::Prismatic, None) => f64::INFINITY,
                    _ => 0.0,
                };
                j.parent_offset.translation.norm() + slide
            })
            .sum::<f64>()
            + self.tip_offset.translation.norm()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let chain: ChainSpec = serde_json::from_str(&text)?;
        chain.validate()?;
        Ok(chain)
    }

    /// Generic 6R desk arm: yaw base, two pitch joints, then a roll-pitch-roll
    /// wrist. Reach is about 0.95 m.
    pub fn desk_arm() -> Self {
        let t = |x: f64, y: f64, z: f64| Transform3::from_translation(Vec3::new(x, y, z));
        let z = [0.0, 0.0, 1.0];
        let y = [0.0, 1.0, 0.0];
        let x = [1.0, 0.0, 0.0];
        ChainSpec {
            joints: vec![
                Joint::revolute(t(0.0, 0.0, 0.10), z).with_limits(-3.0, 3.0),
                Joint::revolute(t(0.0, 0.0, 0.05), y).with_limits(-2.5, 2.5),
                Joint::revolute(t(0.0, 0.0, 0.35), y).with_limits(-2.8, 2.8),
                Joint::revolute(t(0.30, 0.0, 0.0), x).with_limits(-3.0, 3.0),
                Joint::revolute(t(0.06, 0.0, 0.0), y).with_limits(-2.2, 2.2),
                Joint::revolute(t(0.05, 0.0, 0.0), x).with_limits(-3.0, 3.0),
            ],
            tip_offset: t(0.04, 0.0, 0.0),
        }
    }
}

/// Forward kinematics: the tip pose in the base frame.
pub fn fk(chain: &ChainSpec, q: &[f64]) -> Result<Transform3> {
    chain.check(q)?;
    Ok(fk_unchecked(chain, q))
}

fn fk_unchecked(chain: &ChainSpec, q: &[f64]) -> Transform3 {
    chain
        .joints
        .iter()
        .zip(q)
        .fold(Transform3::identity(), |acc, (j, &v)| {
            acc.compose(&j.parent_offset).compose(&j.motion(v))
        })
        .compose(&chain.tip_offset)
}

/// Geometric Jacobian in the base frame, rows (linear; angular).
pub fn jacobian(chain: &ChainSpec, q: &[f64]) -> Result<DMatrix<f64>> {
    chain.check(q)?;
    let tip = fk_unchecked(chain, q).translation;
    let mut jac = DMatrix::zeros(6, chain.dof());
    let mut frame = Transform3::identity();
    for (i, (j, &v)) in chain.joints.iter().zip(q).enumerate() {
        frame = frame.compose(&j.parent_offset);
        let w = frame.rotation.matrix() * j.axis_vec();
        let (lin, ang) = match j.joint_type {
            JointType::Revolute => (w.cross(&(tip - frame.translation)), w),
            JointType::Prismatic => (w, Vec3::zeros()),
        };
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&ang);
        frame = frame.compose(&j.motion(v));
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkOptions {
    pub damping: f64,
    /// Largest change of any joint per iteration.
    pub max_step: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            damping: 0.1,
            max_step: 0.2,
            tol: 1e-4,
            max_iters: 1000,
        }
    }
}

fn pose_error(current: &Transform3, target: &Transform3) -> DVector<f64> {
    let dp = target.translation - current.translation;
    let dr = log_so3(&(target.rotation.matrix() * current.rotation.matrix().transpose()));
    DVector::from_iterator(6, dp.iter().chain(dr.iter()).copied())
}

/// Damped-least-squares inverse kinematics from `q0`.
pub fn ik(
    chain: &ChainSpec,
    target: &Transform3,
    q0: &[f64],
    opts: &IkOptions,
) -> Result<Vec<f64>> {
    chain.check(q0)?;
    let mut q: Vec<f64> = chain
        .joints
        .iter()
        .zip(q0)
        .map(|(j, &v)| j.clamp(v))
        .collect();
    let mut current = fk_unchecked(chain, &q);
    let mut residual = se3_distance(&current, target, 1.0);
    let mut best = (residual, q.clone());
    let lambda2 = opts.damping * opts.damping;
    for _ in 0..opts.max_iters {
        if residual < opts.tol {
            return Ok(q);
        }
        let e = pose_error(&current, target);
        let jac = jacobian(chain, &q)?;
        let jjt = &jac * jac.transpose() + DMatrix::identity(6, 6) * lambda2;
        let Some(y) = jjt.cholesky().map(|c| c.solve(&e)) else {
            break;
        };
        let mut dq = jac.transpose() * y;
        let largest = dq.amax();
        if largest > opts.max_step {
            dq *= opts.max_step / largest;
        }
        for ((v, d), j) in q.iter_mut().zip(dq.iter()).zip(&chain.joints) {
            *v = j.clamp(*v + d);
        }
        current = fk_unchecked(chain, &q);
        residual = se3_distance(&current, target, 1.0);
        if residual < best.0 {
            best = (residual, q.clone());
        }
    }
    if residual < opts.tol {
        return Ok(q);
    }
    Err(Error::IkNotConverged {
        iterations: opts.max_iters,
        residual: best.0,
        best: best.1,
    })
}

/// Pose of the object in the base frame at configuration `q`.
pub fn object_pose(chain: &ChainSpec, q: &[f64], h: &Transform3) -> Result<Transform3> {
    Ok(fk(chain, q)?.compose(h).inverse())
}

/// Points of interest (object frame) expressed in the base frame.
pub fn psi(chain: &ChainSpec, q: &[f64], h: &Transform3, poi: &[Vec3]) -> Result<Vec<Vec3>> {
    if poi.is_empty() {
        return Err(Error::InvalidInput("no points of interest".into()));
    }
    let pose = object_pose(chain, q, h)?;
    Ok(poi.iter().map(|p| pose.apply(p)).collect())
}

/// Configuration placing the object at `object_pose_in_base`.
pub fn psi_inverse(
    chain: &ChainSpec,
    object_pose_in_base: &Transform3,
    h: &Transform3,
    q0: &[f64],
    opts: &IkOptions,
) -> Result<Vec<f64>> {
    let target = object_pose_in_base.inverse().compose(&h.inverse());
    ik(chain, &target, q0, opts)
}

/// Rigid transform best mapping `poi` onto `requested` in the least-squares
/// sense. Needs three or more non-collinear points.
pub fn fit_pose_to_points(poi: &[Vec3], requested: &[Vec3]) -> Result<Transform3> {
    if poi.len() != requested.len() {
        return Err(Error::SizeMismatch(format!(
            "{} vs {} points",
            poi.len(),
            requested.len()
        )));
    }
    if poi.len() < 3 {
        return Err(Error::InvalidInput(
            "need at least 3 points to fix a pose".into(),
        ));
    }
    let inv = 1.0 / poi.len() as f64;
    let cx: Vec3 = poi.iter().sum::<Vec3>() * inv;
    let cy: Vec3 = requested.iter().sum::<Vec3>() * inv;
    let m: Mat3 = poi
        .iter()
        .zip(requested)
        .map(|(x, y)| (y - cy) * (x - cx).transpose())
        .sum();
    let r = procrustes_project(&m)?;
    let t = cy - r.matrix() * cx;
    Ok(Transform3::new(r, t))
}

/// Rotates `current_object_pose` by `angle` about the line through `pivot`
/// (base frame) along `axis`.
pub fn pivot_goal(
    current_object_pose: &Transform3,
    pivot: &Vec3,
    axis: &Vec3,
    angle: f64,
) -> Transform3 {
    let r = exp_so3(&(axis.normalize() * angle));
    let line = Transform3::new(Rotation3::from_matrix_unchecked(r), pivot - r * pivot);
    line.compose(current_object_pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn planar() -> ChainSpec {
        let z = [0.0, 0.0, 1.0];
        ChainSpec::new(
            vec![
                Joint::revolute(Transform3::identity(), z),
                Joint::revolute(Transform3::from_translation(Vec3::new(1.0, 0.0, 0.0)), z),
            ],
            Transform3::from_translation(Vec3::new(1.0, 0.0, 0.0)),
        )
        .unwrap()
    }

    #[test]
    fn fk_cases() {
        let chain = ChainSpec::desk_arm();
        let zero = fk(&chain, &[0.0; 6]).unwrap();
        let offsets = chain
            .joints
            .iter()
            .fold(Transform3::identity(), |a, j| a.compose(&j.parent_offset))
            .compose(&chain.tip_offset);
        assert!((zero.to_matrix() - offsets.to_matrix()).abs().max() < 1e-15);

        let single = ChainSpec::new(
            vec![Joint::revolute(Transform3::identity(), [0.0, 0.0, 1.0])],
            Transform3::identity(),
        )
        .unwrap();
        let t = fk(&single, &[FRAC_PI_2]).unwrap();
        assert!(t.rotation.angle_to(&Rotation3::rot_z(FRAC_PI_2)) < 1e-12);

        let tip = fk(&planar(), &[0.0, FRAC_PI_2]).unwrap().translation;
        assert!((tip - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);

        assert!(fk(&planar(), &[0.0]).is_err());
    }

    #[test]
    fn chain_validation() {
        let bad = ChainSpec::new(
            vec![Joint::revolute(Transform3::identity(), [0.0, 0.0, 2.0])],
            Transform3::identity(),
        );
        assert!(bad.is_err());
        assert!(ChainSpec::new(vec![], Transform3::identity()).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let chain = ChainSpec::desk_arm();
        let q = [0.3, -0.4, 1.1, 0.2, 0.5, -0.7];
        let jac = jacobian(&chain, &q).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let (tp, tm) = (fk(&chain, &qp).unwrap(), fk(&chain, &qm).unwrap());
            let lin = (tp.translation - tm.translation) / (2.0 * h);
            let ang =
                log_so3(&(tp.rotation.matrix() * tm.rotation.matrix().transpose())) / (2.0 * h);
            for r in 0..3 {
                assert!((jac[(r, i)] - lin[r]).abs() < 1e-6);
                assert!((jac[(r + 3, i)] - ang[r]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ik_cases() {
        let chain = ChainSpec::desk_arm();
        let q0 = [0.2, -0.3, 1.0, 0.1, 0.4, 0.0];
        let target = fk(&chain, &q0).unwrap();
        assert_eq!(
            ik(&chain, &target, &q0, &IkOptions::default()).unwrap(),
            q0.to_vec()
        );

        let start = [0.25, -0.27, 0.96, 0.14, 0.37, 0.04];
        let q = ik(&chain, &target, &start, &IkOptions::default()).unwrap();
        assert!(se3_distance(&fk(&chain, &q).unwrap(), &target, 1.0) < 1e-4);

        let far = Transform3::from_translation(Vec3::new(chain.reach() + 0.5, 0.0, 0.0));
        assert!(matches!(
            ik(&chain, &far, &q0, &IkOptions::default()),
            Err(Error::IkNotConverged { .. })
        ));
    }

    #[test]
    fn psi_cases() {
        let chain = ChainSpec::desk_arm();
        let q = [0.2, -0.3, 1.0, 0.1, 0.4, 0.0];
        let origin = psi(&chain, &q, &Transform3::identity(), &[Vec3::zeros()]).unwrap();
        let expected = fk(&chain, &q).unwrap().inverse().translation;
        assert!((origin[0] - expected).norm() < 1e-12);

        // Joint 6 is a roll about the tip axis, so a full turn gives the same pose.
        let mut q2 = q;
        q2[5] += std::f64::consts::TAU;
        let h = Transform3::new(Rotation3::rot_x(0.3), Vec3::new(0.0, 0.02, 0.1));
        let poi = [Vec3::new(0.01, 0.02, 0.03), Vec3::new(-0.05, 0.0, 0.1)];
        let a = psi(&chain, &q, &h, &poi).unwrap();
        let b = psi(&chain, &q2, &h, &poi).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn psi_inverse_identity_request() {
        let chain = ChainSpec::desk_arm();
        let q = [0.2, -0.3, 1.0, 0.1, 0.4, 0.0];
        let h = Transform3::new(Rotation3::rot_y(0.5), Vec3::new(0.01, 0.0, 0.12));
        let pose = object_pose(&chain, &q, &h).unwrap();
        let back = psi_inverse(&chain, &pose, &h, &q, &IkOptions::default()).unwrap();
        for (a, b) in back.iter().zip(&q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pivot_goal_cases() {
        let pose = Transform3::new(Rotation3::rot_z(0.4), Vec3::new(0.3, -0.1, 0.2));
        let pivot = Vec3::new(0.35, 0.0, 0.25);
        let axis = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(pivot_goal(&pose, &pivot, &axis, 0.0), pose);

        let moved = pivot_goal(&pose, &pivot, &axis, 0.8);
        // The pivot's object-frame coordinates land on the same base point.
        let local = pose.inverse().apply(&pivot);
        assert!((moved.apply(&local) - pivot).norm() < 1e-12);

        let at_origin = pivot_goal(&pose, &pose.translation, &axis, 0.8);
        assert!((at_origin.translation - pose.translation).norm() < 1e-12);
    }

    #[test]
    fn point_fit_recovers_pose() {
        let truth = Transform3::new(
            Rotation3::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0).normalize(), 0.9),
            Vec3::new(0.1, 0.2, -0.3),
        );
        let poi = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.1, 0.0, 0.0),
            Vec3::new(0.0, 0.05, 0.0),
            Vec3::new(0.0, 0.0, 0.2),
        ];
        let req: Vec<Vec3> = poi.iter().map(|p| truth.apply(p)).collect();
        let fit = fit_pose_to_points(&poi, &req).unwrap();
        assert!(se3_distance(&fit, &truth, 1.0) < 1e-12);
        assert!(fit_pose_to_points(&poi[..2], &req[..2]).is_err());
    }

    #[test]
    fn chain_json_round_trip() {
        let chain = ChainSpec::desk_arm();
        let text = serde_json::to_string(&chain).unwrap();
        assert!(text.contains("\"type\":\"revolute\""));
        let back: ChainSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, chain);
    }
}
