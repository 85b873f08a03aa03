//! Synthetic scenarios with known ground truth: a parametric object held by
//! a simulated arm and observed by a fixed pinhole camera.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coord_align::{self, AlignmentProblem};
use crate::error::{Error, Result};
use crate::kinematics::{fk, ik, ChainSpec, IkOptions};
use crate::ope::CameraObjectPose;
use crate::ply;
use crate::pointmap::{self, ConfidenceMap, PairPrediction, Pointmap};
use crate::raster::Mask;
use crate::se3::{exp_so3, row_major, DenseCloud, Intrinsics, Mat3, Rotation3, Transform3, Vec3};

/// Depth at which distance-scaled noise equals its nominal sigma.
pub const NOISE_REFERENCE_DEPTH: f64 = 0.5;
/// Every object point must stay at least this far in front of the camera.
pub const MIN_DEPTH: f64 = 0.05;
const CONF_MAX: f64 = 3.0;
const CONF_SIGMA: f64 = 0.002;

fn unit(v: [f64; 3]) -> Result<Vec3> {
    let v = Vec3::from(v);
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput("axis must be nonzero".into()));
    }
    Ok(v / n)
}

/// Orthonormal pair perpendicular to `a`.
fn basis(a: &Vec3) -> (Vec3, Vec3) {
    let helper = if a.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let u = a.cross(&helper).normalize();
    (u, a.cross(&u))
}

/// Surface primitive sampled by [`make_object`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned box surface.
    Box { center: [f64; 3], size: [f64; 3] },
    /// Closed cylinder; `center` is the middle of the axis segment.
    Cylinder {
        center: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        length: f64,
    },
    Torus {
        center: [f64; 3],
        axis: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    /// Axis-aligned ellipsoid surface.
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        let positive = |vals: &[f64]| vals.iter().all(|v| *v > 0.0 && v.is_finite());
        let ok = match self {
            Primitive::Box { size, .. } => positive(size),
            Primitive::Cylinder {
                axis,
                radius,
                length,
                ..
            } => {
                unit(*axis)?;
                positive(&[*radius, *length])
            }
            Primitive::Torus {
                axis,
                major_radius,
                minor_radius,
                ..
            } => {
                unit(*axis)?;
                positive(&[*major_radius, *minor_radius]) && minor_radius < major_radius
            }
            Primitive::Ellipsoid { radii, .. } => positive(radii),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid primitive {self:?}")))
        }
    }

    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Primitive::Box {
                size: [a, b, c], ..
            } => 2.0 * (a * b + b * c + a * c),
            Primitive::Cylinder { radius, length, .. } => 2.0 * PI * radius * (length + radius),
            Primitive::Torus {
                major_radius,
                minor_radius,
                ..
            } => 4.0 * PI * PI * major_radius * minor_radius,
            Primitive::Ellipsoid {
                radii: [a, b, c], ..
            } => {
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        use std::f64::consts::TAU;
        match self {
            Primitive::Box { center, size } => {
                let s = Vec3::from(*size);
                let areas = [s.y * s.z, s.x * s.z, s.x * s.y];
                let pick = rng.random::<f64>() * (areas[0] + areas[1] + areas[2]);
                let axis = if pick < areas[0] {
                    0
                } else if pick < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let mut p = Vec3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                );
                p[axis] = if rng.random::<bool>() { 0.5 } else { -0.5 };
                Vec3::from(*center) + p.component_mul(&s)
            }
            Primitive::Cylinder {
                center,
                axis,
                radius,
                length,
            } => {
                let a = Vec3::from(*axis).normalize();
                let (u, w) = basis(&a);
                let side = length / (length + radius);
                let phi = TAU * rng.random::<f64>();
                let dir = u * phi.cos() + w * phi.sin();
                let c = Vec3::from(*center);
                if rng.random::<f64>() < side {
                    c + a * (length * (rng.random::<f64>() - 0.5)) + dir * *radius
                } else {
                    let cap = if rng.random::<bool>() { 0.5 } else { -0.5 };
                    c + a * (length * cap) + dir * (radius * rng.random::<f64>().sqrt())
                }
            }
            Primitive::Torus {
                center,
                axis,
                major_radius,
                minor_radius,
            } => {
                let a = Vec3::from(*axis).normalize();
                let (u, w) = basis(&a);
                // Rejection on the tube angle makes the density uniform in area.
                let theta = loop {
                    let t = TAU * rng.random::<f64>();
                    let accept =
                        (major_radius + minor_radius * t.cos()) / (major_radius + minor_radius);
                    if rng.random::<f64>() <= accept {
                        break t;
                    }
                };
                let phi = TAU * rng.random::<f64>();
                let radial = u * phi.cos() + w * phi.sin();
                Vec3::from(*center)
                    + radial * (major_radius + minor_radius * theta.cos())
                    + a * (minor_radius * theta.sin())
            }
            Primitive::Ellipsoid { center, radii } => {
                let g = Vec3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let d = g.try_normalize(1e-12).unwrap_or(Vec3::z());
                Vec3::from(*center) + d.component_mul(&Vec3::from(*radii))
            }
        }
    }
}

fn default_handle_length() -> f64 {
    0.18
}
fn default_handle_radius() -> f64 {
    0.012
}
fn default_head_length() -> f64 {
    0.1
}
fn default_head_size() -> f64 {
    0.03
}
fn default_block() -> [f64; 3] {
    [0.1, 0.1, 0.1]
}
fn default_major() -> f64 {
    0.05
}
fn default_minor() -> f64 {
    0.01
}
fn default_scale() -> f64 {
    1.0
}

/// Parametric test objects, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectSpec {
    Hammer {
        #[serde(default = "default_handle_length")]
        handle_length: f64,
        #[serde(default = "default_handle_radius")]
        handle_radius: f64,
        #[serde(default = "default_head_length")]
        head_length: f64,
        #[serde(default = "default_head_size")]
        head_size: f64,
    },
    Block {
        #[serde(default = "default_block")]
        size: [f64; 3],
    },
    Tape {
        #[serde(default = "default_major")]
        major_radius: f64,
        #[serde(default = "default_minor")]
        minor_radius: f64,
    },
    Teapot {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Custom {
        parts: Vec<Primitive>,
    },
}

impl Default for ObjectSpec {
    fn default() -> Self {
        ObjectSpec::Hammer {
            handle_length: default_handle_length(),
            handle_radius: default_handle_radius(),
            head_length: default_head_length(),
            head_size: default_head_size(),
        }
    }
}

struct Spout {
    base: Vec3,
    dir: Vec3,
    length: f64,
}

fn teapot_spout(scale: f64) -> Spout {
    Spout {
        base: Vec3::new(0.06, 0.0, 0.0) * scale,
        dir: Vec3::new(1.0, 0.0, 0.8).normalize(),
        length: 0.07 * scale,
    }
}

impl ObjectSpec {
    pub fn block(sx: f64, sy: f64, sz: f64) -> Self {
        ObjectSpec::Block { size: [sx, sy, sz] }
    }

    pub fn tape(major_radius: f64, minor_radius: f64) -> Self {
        ObjectSpec::Tape {
            major_radius,
            minor_radius,
        }
    }

    pub fn teapot() -> Self {
        ObjectSpec::Teapot { scale: 1.0 }
    }

    pub fn parts(&self) -> Result<Vec<Primitive>> {
        let parts = match self {
            ObjectSpec::Hammer {
                handle_length,
                handle_radius,
                head_length,
                head_size,
            } => {
                let x0 = -0.5 * handle_length;
                vec![
                    Primitive::Cylinder {
                        center: [0.0, 0.0, 0.0],
                        axis: [1.0, 0.0, 0.0],
                        radius: *handle_radius,
                        length: *handle_length,
                    },
                    Primitive::Box {
                        center: [x0 + handle_length + 0.5 * head_size, 0.0, 0.0],
                        size: [*head_size, *head_length, *head_size],
                    },
                ]
            }
            ObjectSpec::Block { size } => vec![Primitive::Box {
                center: [0.0; 3],
                size: *size,
            }],
            ObjectSpec::Tape {
                major_radius,
                minor_radius,
            } => vec![Primitive::Torus {
                center: [0.0; 3],
                axis: [0.0, 0.0, 1.0],
                major_radius: *major_radius,
                minor_radius: *minor_radius,
            }],
            ObjectSpec::Teapot { scale } => {
                let s = *scale;
                let spout = teapot_spout(s);
                let mid = spout.base + spout.dir * (0.5 * spout.length);
                vec![
                    Primitive::Ellipsoid {
                        center: [0.0; 3],
                        radii: [0.07 * s, 0.07 * s, 0.055 * s],
                    },
                    Primitive::Cylinder {
                        center: mid.into(),
                        axis: spout.dir.into(),
                        radius: 0.01 * s,
                        length: spout.length,
                    },
                    Primitive::Torus {
                        center: [-0.075 * s, 0.0, 0.0],
                        axis: [0.0, 1.0, 0.0],
                        major_radius: 0.03 * s,
                        minor_radius: 0.008 * s,
                    },
                    Primitive::Cylinder {
                        center: [0.0, 0.0, 0.06 * s],
                        axis: [0.0, 0.0, 1.0],
                        radius: 0.03 * s,
                        length: 0.01 * s,
                    },
                ]
            }
            ObjectSpec::Custom { parts } => parts.clone(),
        };
        if parts.is_empty() {
            return Err(Error::InvalidInput("object has no parts".into()));
        }
        for p in &parts {
            p.validate()?;
        }
        Ok(parts)
    }

    /// Tip of the spout for the teapot, the origin otherwise.
    pub fn point_of_interest(&self) -> Vec3 {
        match self {
            ObjectSpec::Teapot { scale } => {
                let s = teapot_spout(*scale);
                s.base + s.dir * s.length
            }
            _ => Vec3::zeros(),
        }
    }
}

pub const MIN_POINTS: usize = 2000;
pub const MAX_POINTS: usize = 20000;

/// Surface samples of `spec`, allocated to the parts by area.
pub fn make_object(spec: &ObjectSpec, n_points: usize, seed: u64) -> Result<DenseCloud> {
    if !(MIN_POINTS..=MAX_POINTS).contains(&n_points) {
        return Err(Error::InvalidInput(format!(
            "point count {n_points} outside [{MIN_POINTS}, {MAX_POINTS}]"
        )));
    }
    let parts = spec.parts()?;
    let areas: Vec<f64> = parts.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    let mut counts: Vec<usize> = areas
        .iter()
        .map(|a| (a / total * n_points as f64).floor() as usize)
        .collect();
    let largest = (0..parts.len())
        .max_by(|&a, &b| areas[a].total_cmp(&areas[b]))
        .expect("nonempty parts");
    counts[largest] += n_points - counts.iter().sum::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    for (p, &c) in parts.iter().zip(&counts) {
        for _ in 0..c {
            points.push(p.sample(&mut rng));
        }
    }
    DenseCloud::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub point_sigma: f64,
    pub pose_rot_sigma: f64,
    pub pose_trans_sigma: f64,
    /// Multiplies every sigma by `(depth / NOISE_REFERENCE_DEPTH)²`.
    pub distance_scaling: bool,
    /// Translation noise along the viewing ray relative to the lateral noise.
    pub depth_ratio: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            point_sigma: 0.0,
            pose_rot_sigma: 0.0,
            pose_trans_sigma: 0.0,
            distance_scaling: false,
            depth_ratio: 1.0,
        }
    }
}

impl NoiseSpec {
    /// Noise typical of a monocular reconstruction: small point jitter,
    /// rotation noise of about half a degree and depth error much larger
    /// than lateral error, all growing with distance.
    pub fn monocular() -> Self {
        NoiseSpec {
            point_sigma: 0.001,
            pose_rot_sigma: 0.01,
            pose_trans_sigma: 0.001,
            distance_scaling: true,
            depth_ratio: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.point_sigma,
            self.pose_rot_sigma,
            self.pose_trans_sigma,
            self.depth_ratio,
        ];
        if vals.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "noise sigmas must be nonnegative".into(),
            ))
        }
    }

    pub fn factor(&self, depth: f64) -> f64 {
        if self.distance_scaling {
            (depth / NOISE_REFERENCE_DEPTH).powi(2)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointmapSpec {
    pub width: usize,
    pub height: usize,
    /// Each image is paired with this many successors.
    pub pairs_per_image: usize,
}

impl Default for PointmapSpec {
    fn default() -> Self {
        PointmapSpec {
            width: 64,
            height: 48,
            pairs_per_image: 2,
        }
    }
}

/// Scenario description as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub object: ObjectSpec,
    pub n_points: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Drawn from [0.5, 3] when absent.
    pub alpha: Option<f64>,
    pub noise: NoiseSpec,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    /// Range of object depths in front of the camera, meters.
    pub depth_range: [f64; 2],
    /// Largest deviation of the object orientation from its nominal one, radians.
    pub max_tilt: f64,
    pub pointmap: PointmapSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nominal_configuration: Option<Vec<f64>>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            seed: 0,
            object: ObjectSpec::default(),
            n_points: 4000,
            n_train: 9,
            n_test: 5,
            alpha: None,
            noise: NoiseSpec::default(),
            intrinsics: default_intrinsics(),
            width: 640,
            height: 480,
            depth_range: [0.45, 0.95],
            max_tilt: 0.45,
            pointmap: PointmapSpec::default(),
            chain: None,
            nominal_configuration: None,
        }
    }
}

pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 600.0,
        fy: 600.0,
        cx: 320.0,
        cy: 240.0,
    }
}

pub const DESK_NOMINAL: [f64; 6] = [0.0, 0.5, -0.2, 0.0, 0.6, 0.0];

impl ScenarioSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.intrinsics.validate()?;
        if self.n_train < 2 {
            return Err(Error::InvalidInput("need at least 2 training poses".into()));
        }
        if let Some(a) = self.alpha {
            if !(0.2..=5.0).contains(&a) {
                return Err(Error::InvalidInput(format!("alpha {a} outside [0.2, 5]")));
            }
        }
        let [lo, hi] = self.depth_range;
        if !(lo > MIN_DEPTH && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "invalid depth range [{lo}, {hi}]"
            )));
        }
        if self.width == 0
            || self.height == 0
            || self.pointmap.width == 0
            || self.pointmap.height == 0
        {
            return Err(Error::InvalidInput("raster sizes must be positive".into()));
        }
        if !(self.max_tilt >= 0.0) {
            return Err(Error::InvalidInput("max_tilt must be nonnegative".into()));
        }
        if let Some(c) = &self.chain {
            c.validate()?;
        }
        Ok(())
    }
}

/// A fully instantiated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    /// Object surface in meters, object frame.
    pub object_cloud: DenseCloud,
    pub h_true: Transform3,
    pub cam_base_true: Transform3,
    pub alpha_true: f64,
    pub chain: ChainSpec,
    pub train_configs: Vec<Vec<f64>>,
    pub test_configs: Vec<Vec<f64>>,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let g = Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        StandardNormal.sample(rng),
        g.x,
        g.y,
        g.z,
    ));
    *q.to_rotation_matrix().matrix()
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let g = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(d) = g.try_normalize(1e-9) {
            return d;
        }
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::zeros();
    }
    Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ) * sigma
}

/// Camera-object pose implied by the stationarity equality,
/// `H⁻¹ E⁻¹ · ^C T_B`.
pub fn true_cam_obj(h: &Transform3, ee: &Transform3, cam_base: &Transform3) -> Transform3 {
    coord_align::predict_object_pose(h, cam_base, ee)
}

/// Checks that the object lies in front of the camera and inside the frame.
fn visible(
    cloud: &DenseCloud,
    pose: &Transform3,
    k: &Intrinsics,
    width: usize,
    height: usize,
) -> bool {
    let margin = 2.0;
    cloud.points.iter().all(|x| {
        let p = pose.apply(x);
        if p.z <= MIN_DEPTH {
            return false;
        }
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        u >= margin
            && v >= margin
            && u <= width as f64 - 1.0 - margin
            && v <= height as f64 - 1.0 - margin
    })
}

const MAX_ATTEMPTS: usize = 400;

impl Scenario {
    /// Draws the hidden quantities and one reachable, visible configuration
    /// per training and test pose.
    pub fn build(spec: &ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let object_cloud =
            make_object(&spec.object, spec.n_points, spec.seed.wrapping_add(0x5eed))?;
        let alpha_true = match spec.alpha {
            Some(a) => a,
            None => rng.random_range(0.5..3.0),
        };
        let chain = spec.chain.clone().unwrap_or_else(ChainSpec::desk_arm);
        let q_nom = match &spec.nominal_configuration {
            Some(q) => q.clone(),
            None if spec.chain.is_none() => DESK_NOMINAL.to_vec(),
            None => vec![0.0; chain.dof()],
        };
        chain.check(&q_nom)?;

        let h_true = Transform3::new(
            Rotation3::from_matrix_unchecked(random_rotation(&mut rng)),
            random_direction(&mut rng) * rng.random_range(0.02..0.1),
        );
        let [lo, hi] = spec.depth_range;
        let r_nom = random_rotation(&mut rng);
        let v_nom = Transform3::new(
            Rotation3::from_matrix_unchecked(r_nom),
            Vec3::new(0.0, 0.0, 0.5 * (lo + hi)),
        );
        let e_nom = fk(&chain, &q_nom)?;
        let cam_base_true = e_nom.compose(&h_true).compose(&v_nom);
        let k = spec.intrinsics;
        let ik_opts = IkOptions {
            max_iters: 300,
            ..IkOptions::default()
        };

        let total = spec.n_train + spec.n_test;
        let mut configs = Vec::with_capacity(total);
        for pose in 0..total {
            let mut found = None;
            for _ in 0..MAX_ATTEMPTS {
                let tilt = random_direction(&mut rng) * rng.random_range(0.0..=spec.max_tilt);
                let z = rng.random_range(lo..=hi);
                let x = z * rng.random_range(-0.12..0.12);
                let y = z * rng.random_range(-0.08..0.08);
                let v = Transform3::new(
                    Rotation3::from_matrix_unchecked(r_nom * exp_so3(&tilt)),
                    Vec3::new(x, y, z),
                );
                let target = cam_base_true
                    .compose(&v.inverse())
                    .compose(&h_true.inverse());
                let Ok(q) = ik(&chain, &target, &q_nom, &ik_opts) else {
                    continue;
                };
                let cam_obj = true_cam_obj(&h_true, &fk(&chain, &q)?, &cam_base_true);
                if visible(&object_cloud, &cam_obj, &k, spec.width, spec.height) {
                    found = Some(q);
                    break;
                }
            }
            match found {
                Some(q) => configs.push(q),
                None => {
                    return Err(Error::Visibility(format!(
                        "no reachable configuration keeps the object in view for pose {pose}"
                    )))
                }
            }
        }
        let test_configs = configs.split_off(spec.n_train);
        Ok(Scenario {
            spec: spec.clone(),
            object_cloud,
            h_true,
            cam_base_true,
            alpha_true,
            chain,
            train_configs: configs,
            test_configs,
        })
    }

    pub fn train_ee_poses(&self) -> Result<Vec<Transform3>> {
        self.train_configs
            .iter()
            .map(|q| fk(&self.chain, q))
            .collect()
    }

    pub fn test_ee_poses(&self) -> Result<Vec<Transform3>> {
        self.test_configs
            .iter()
            .map(|q| fk(&self.chain, q))
            .collect()
    }

    pub fn true_cam_obj(&self, ee: &Transform3) -> Transform3 {
        true_cam_obj(&self.h_true, ee, &self.cam_base_true)
    }
}

/// Everything the evaluation needs to know about the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    #[serde(rename = "H", with = "row_major")]
    pub h_true: Transform3,
    pub alpha: f64,
    #[serde(with = "row_major")]
    pub cam_base: Transform3,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub train_configs: Vec<Vec<f64>>,
    pub test_configs: Vec<Vec<f64>>,
    #[serde(with = "row_major::list")]
    pub train_ee_poses: Vec<Transform3>,
    #[serde(with = "row_major::list")]
    pub test_ee_poses: Vec<Transform3>,
    /// Silhouette masks of the test poses, relative to the ground-truth file.
    pub test_masks: Vec<PathBuf>,
    /// Object-frame point of interest (spout tip for the teapot).
    pub point_of_interest: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub problem: AlignmentProblem,
    pub pairs: Vec<PairPrediction>,
    pub truth: GroundTruth,
    pub test_masks: Vec<Mask>,
}

/// Silhouette from rounding the projected object points.
pub fn render_mask(
    cloud: &DenseCloud,
    pose: &Transform3,
    k: &Intrinsics,
    width: usize,
    height: usize,
) -> Mask {
    let mut mask = Mask::filled(width, height, false);
    for x in &cloud.points {
        let p = pose.apply(x);
        if p.z <= MIN_DEPTH {
            continue;
        }
        let u = (k.fx * p.x / p.z + k.cx).round();
        let v = (k.fy * p.y / p.z + k.cy).round();
        if u >= 0.0 && v >= 0.0 && (u as usize) < width && (v as usize) < height {
            mask.set(u as usize, v as usize, true);
        }
    }
    mask
}

/// Index of the nearest object point at every pixel.
fn zbuffer(
    cloud: &DenseCloud,
    pose: &Transform3,
    k: &Intrinsics,
    width: usize,
    height: usize,
) -> Vec<Option<usize>> {
    let mut depth = vec![f64::INFINITY; width * height];
    let mut idx = vec![None; width * height];
    for (i, x) in cloud.points.iter().enumerate() {
        let p = pose.apply(x);
        if p.z <= MIN_DEPTH {
            continue;
        }
        let u = (k.fx * p.x / p.z + k.cx).round();
        let v = (k.fy * p.y / p.z + k.cy).round();
        if u < 0.0 || v < 0.0 || u as usize >= width || v as usize >= height {
            continue;
        }
        let at = v as usize * width + u as usize;
        if p.z < depth[at] {
            depth[at] = p.z;
            idx[at] = Some(i);
        }
    }
    idx
}

/// Pair list in which every image leads at least one pair.
pub fn pair_list(n_images: usize, pairs_per_image: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for n in 0..n_images {
        for step in 1..=pairs_per_image.max(1).min(n_images - 1) {
            out.push((n, (n + step) % n_images));
        }
    }
    out
}

/// Runs the forward model of a scenario.
pub fn generate(scn: &Scenario) -> Result<Generated> {
    let spec = &scn.spec;
    let alpha = scn.alpha_true;
    let k = spec.intrinsics;
    let noise = spec.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);

    let train_ee = scn.train_ee_poses()?;
    let test_ee = scn.test_ee_poses()?;
    let truth_poses: Vec<Transform3> = train_ee.iter().map(|e| scn.true_cam_obj(e)).collect();
    for (n, pose) in truth_poses.iter().enumerate() {
        if !visible(&scn.object_cloud, pose, &k, spec.width, spec.height) {
            return Err(Error::Visibility(format!(
                "training configuration {n} hides the object"
            )));
        }
    }

    let cam_obj_poses: Vec<CameraObjectPose> = truth_poses
        .iter()
        .map(|c| {
            let f = noise.factor(c.translation.z);
            let dr = exp_so3(&gaussian3(&mut rng, noise.pose_rot_sigma * f));
            let mut dt = gaussian3(&mut rng, noise.pose_trans_sigma * f);
            let ray = c.translation.normalize();
            dt += ray * ((noise.depth_ratio - 1.0) * ray.dot(&dt));
            CameraObjectPose {
                rotation: Rotation3::from_matrix_unchecked(dr * c.rotation.matrix()),
                translation: (c.translation + dt) / alpha,
            }
        })
        .collect();
    let dense_points: Vec<Vec3> = scn
        .object_cloud
        .points
        .iter()
        .map(|x| (x + gaussian3(&mut rng, noise.point_sigma)) / alpha)
        .collect();
    let problem = AlignmentProblem {
        ee_poses: train_ee.clone(),
        cam_obj_poses,
        dense: DenseCloud::new(dense_points)?,
        intrinsics: k,
        render_subsample: 1,
    };

    let pm = spec.pointmap;
    let k_pm = k.scaled(pm.width as f64 / spec.width as f64);
    let zbuffers: Vec<Vec<Option<usize>>> = truth_poses
        .iter()
        .map(|c| zbuffer(&scn.object_cloud, c, &k_pm, pm.width, pm.height))
        .collect();
    let mut pairs = Vec::new();
    for (n, m) in pair_list(train_ee.len(), pm.pairs_per_image) {
        let scale = rng.random_range(-0.7f64..0.7).exp() / alpha;
        let mut member = |img: usize| -> Result<(Pointmap, ConfidenceMap)> {
            let sigma = noise.point_sigma * noise.factor(truth_poses[img].translation.z);
            let conf = CONF_MAX / (1.0 + sigma / CONF_SIGMA);
            let mut coords = Vec::with_capacity(pm.width * pm.height);
            let mut confs = Vec::with_capacity(pm.width * pm.height);
            for hit in &zbuffers[img] {
                match hit {
                    Some(i) => {
                        let x = scn.object_cloud.points[*i];
                        coords
                            .push((truth_poses[n].apply(&x) + gaussian3(&mut rng, sigma)) * scale);
                        confs.push(conf);
                    }
                    None => {
                        coords.push(Vec3::zeros());
                        confs.push(0.0);
                    }
                }
            }
            Ok((
                Pointmap::new(pm.width, pm.height, coords)?,
                ConfidenceMap::new(pm.width, pm.height, confs)?,
            ))
        };
        let (x_nn, c_nn) = member(n)?;
        let (x_nm, c_nm) = member(m)?;
        pairs.push(PairPrediction {
            n,
            m,
            x_nn,
            x_nm,
            c_nn,
            c_nm,
        });
    }

    let test_masks: Vec<Mask> = test_ee
        .iter()
        .map(|e| {
            render_mask(
                &scn.object_cloud,
                &scn.true_cam_obj(e),
                &k,
                spec.width,
                spec.height,
            )
        })
        .collect();
    let truth = GroundTruth {
        h_true: scn.h_true,
        alpha,
        cam_base: scn.cam_base_true,
        intrinsics: k,
        width: spec.width,
        height: spec.height,
        train_configs: scn.train_configs.clone(),
        test_configs: scn.test_configs.clone(),
        train_ee_poses: train_ee,
        test_ee_poses: test_ee,
        test_masks: (0..test_masks.len())
            .map(|i| PathBuf::from(format!("masks/test_{i:03}.pgm")))
            .collect(),
        point_of_interest: spec.object.point_of_interest().into(),
    };
    Ok(Generated {
        problem,
        pairs,
        truth,
        test_masks,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the scenario outputs into `dir`:
///
/// ```text
/// scenario.json  chain.json  object.ply  ground_truth.json
/// problem.json   problem_dense.ply  ee_poses.json  intrinsics.json
/// pairs/manifest.json  pairs/*.pmap
/// masks/test_*.pgm
/// ```
pub fn export(scn: &Scenario, generated: &Generated, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    create_dir(&dir.join("pairs"))?;
    create_dir(&dir.join("masks"))?;
    write_json(&dir.join("scenario.json"), &scn.spec)?;
    write_json(&dir.join("chain.json"), &scn.chain)?;
    ply::write_ply(&dir.join("object.ply"), &scn.object_cloud)?;
    coord_align::write_problem(dir, "problem", &generated.problem)?;
    let ee: Vec<[f64; 16]> = generated
        .problem
        .ee_poses
        .iter()
        .map(Transform3::to_row_major)
        .collect();
    write_json(&dir.join("ee_poses.json"), &ee)?;
    write_json(&dir.join("intrinsics.json"), &generated.problem.intrinsics)?;
    pointmap::write_manifest(&dir.join("pairs"), &generated.pairs)?;
    for (mask, name) in generated.test_masks.iter().zip(&generated.truth.test_masks) {
        mask.write_pgm(&dir.join(name))?;
    }
    write_json(&dir.join("ground_truth.json"), &generated.truth)
}

/// Reads `ground_truth.json` and the test masks from an exported scenario.
pub fn load_testset(dir: &Path) -> Result<(GroundTruth, Vec<Mask>)> {
    let path = dir.join("ground_truth.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let truth: GroundTruth = serde_json::from_str(&text)?;
    if truth.test_masks.len() != truth.test_ee_poses.len() {
        return Err(Error::SizeMismatch(format!(
            "{} test masks for {} test poses",
            truth.test_masks.len(),
            truth.test_ee_poses.len()
        )));
    }
    let masks = truth
        .test_masks
        .iter()
        .map(|m| Mask::read_pgm(&dir.join(m)))
        .collect::<Result<Vec<_>>>()?;
    Ok((truth, masks))
}
