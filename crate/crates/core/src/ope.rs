//! Stationary-camera reading of the aligned reconstruction: instead of one
//! static object seen by `N` cameras, one camera sees the object at `N` poses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointmap::GlobalAlignmentResult;
use crate::se3::{apply_points, DenseCloud, Rotation3, Transform3, Vec3};

/// Rotation and unscaled translation of `P̄_n⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraObjectPose {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl CameraObjectPose {
    /// Blocks of the inverse of a camera-to-world pose.
    pub fn from_camera_pose(p: &Transform3) -> Self {
        let inv = p.inverse();
        CameraObjectPose {
            rotation: inv.rotation,
            translation: inv.translation,
        }
    }

    pub fn to_transform(&self) -> Transform3 {
        Transform3::new(self.rotation, self.translation)
    }

    /// `[R_n, α t_n; 0, 1]`.
    pub fn scaled_pose(&self, alpha: f64) -> Result<Transform3> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "scale must be positive, got {alpha}"
            )));
        }
        Ok(Transform3::new(self.rotation, alpha * self.translation))
    }
}

impl Serialize for CameraObjectPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_transform().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraObjectPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let t = Transform3::deserialize(d)?;
        Ok(CameraObjectPose {
            rotation: t.rotation,
            translation: t.translation,
        })
    }
}

pub fn scaled_pose(p: &CameraObjectPose, alpha: f64) -> Result<Transform3> {
    p.scaled_pose(alpha)
}

/// The reconstruction as seen at one pose. Points are only materialized on
/// request.
#[derive(Debug, Clone, Copy)]
pub struct PoseView<'a> {
    pub pose: CameraObjectPose,
    pub dense: &'a DenseCloud,
}

impl PoseView<'_> {
    pub fn cloud(&self) -> DenseCloud {
        apply_points(self.dense, &self.pose.to_transform())
    }
}

/// One view per camera pose, transforming the dense cloud by `P̄_n⁻¹`.
pub fn reinterpret(result: &GlobalAlignmentResult) -> Result<Vec<PoseView<'_>>> {
    if result.camera_poses.is_empty() {
        return Err(Error::InvalidInput("no camera poses to reinterpret".into()));
    }
    Ok(result
        .camera_poses
        .iter()
        .map(|p| PoseView {
            pose: CameraObjectPose::from_camera_pose(p),
            dense: &result.dense,
        })
        .collect())
}
