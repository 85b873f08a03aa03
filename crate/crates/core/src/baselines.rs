//! Comparison methods: the same estimator fitted in pose space instead of
//! image space, and a direct regression from end-effector pose to object
//! pose.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coord_align::{
    estimator_jets, finish, minimize, AlignSolverOptions, AlignmentProblem, AlignmentSolution,
    Objective, RawParams, DEPTH_EPSILON, N_RAW,
};
use crate::error::{Error, Result};
use crate::ope::CameraObjectPose;
use crate::optim::{cosine_factor, Adam};
use crate::se3::{geodesic_angle, vee_skew, Mat3, PolarFactor, Rotation3, Transform3, Vec3};

/// Angle between two rotations and its gradient with respect to the first.
fn angle_and_grad(r: &Mat3, target: &Mat3) -> (f64, Mat3) {
    let rel = target.transpose() * r;
    let theta = geodesic_angle(&rel);
    let sin = 0.5 * vee_skew(&rel).norm();
    let grad = if sin > 1e-12 {
        target * (-0.5 / sin)
    } else {
        Mat3::zeros()
    };
    (theta, grad)
}

struct PoseSpaceObjective<'a> {
    problem: &'a AlignmentProblem,
    rot_weight: f64,
}

impl Objective for PoseSpaceObjective<'_> {
    fn value_and_grad(&self, params: &RawParams) -> Result<(f64, [f64; N_RAW])> {
        let jets = estimator_jets(params, self.problem, true)?;
        let alpha = params.alpha();
        let inv_n = 1.0 / jets.len() as f64;
        let mut value = 0.0;
        let mut grad = [0.0; N_RAW];
        for (jet, obs) in jets.iter().zip(&self.problem.cam_obj_poses) {
            let (theta, g_rot) = angle_and_grad(&jet.rotation, obs.rotation.matrix());
            let diff = jet.translation - alpha * obs.translation;
            let dist = diff.norm();
            value += (self.rot_weight * theta + dist) * inv_n;
            let u = if dist > 0.0 {
                diff / dist
            } else {
                Vec3::zeros()
            };
            for (k, g) in grad.iter_mut().enumerate() {
                let mut d =
                    self.rot_weight * g_rot.dot(&jet.d_rotation[k]) + u.dot(&jet.d_translation[k]);
                if k == N_RAW - 1 {
                    d -= u.dot(&(alpha * obs.translation));
                }
                *g += d * inv_n;
            }
        }
        Ok((value, grad))
    }
}

/// Mean over poses of `se3_distance(f_n(H, α), C_n(α), rot_weight)`.
pub fn pose_space_loss(
    h: &Transform3,
    alpha: f64,
    problem: &AlignmentProblem,
    rot_weight: f64,
) -> Result<f64> {
    let params = RawParams::new(h, alpha)?;
    PoseSpaceObjective {
        problem,
        rot_weight,
    }
    .value_and_grad(&params)
    .map(|v| v.0)
}

pub fn pose_space_loss_and_grad(
    params: &RawParams,
    problem: &AlignmentProblem,
    rot_weight: f64,
) -> Result<(f64, [f64; N_RAW])> {
    PoseSpaceObjective {
        problem,
        rot_weight,
    }
    .value_and_grad(params)
}

/// Fits `(H, α)` by minimizing pose-space distances instead of rendering.
pub fn solve_no_render(
    problem: &AlignmentProblem,
    opts: &AlignSolverOptions,
) -> Result<AlignmentSolution> {
    problem.validate()?;
    let objective = PoseSpaceObjective {
        problem,
        rot_weight: opts.rot_weight,
    };
    let (params, start_losses) = minimize(&objective, problem, opts)?;
    finish(params, problem, start_losses)
}

pub const INPUT_DIM: usize = 12;
pub const HIDDEN: usize = 64;
pub const OUTPUT_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// Row per output unit.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.weights.len(), self.weights[0].len(), |r, c| {
            self.weights[r][c]
        })
    }
}

/// Parameters of the 12→64→64→12 regressor together with its input and
/// output normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorParams {
    pub layers: Vec<Layer>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub translation_mean: [f64; 3],
    pub translation_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorOptions {
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub rot_weight: f64,
}

impl Default for RegressorOptions {
    fn default() -> Self {
        RegressorOptions {
            learning_rate: 3e-3,
            iterations: 3000,
            seed: 0,
            rot_weight: 1.0,
        }
    }
}

fn encode(pose: &Transform3) -> [f64; INPUT_DIM] {
    let flat = pose.to_row_major();
    [
        flat[0], flat[1], flat[2], flat[4], flat[5], flat[6], flat[8], flat[9], flat[10], flat[3],
        flat[7], flat[11],
    ]
}

/// Dense form of the network used during training.
struct Net {
    w: [DMatrix<f64>; 3],
    b: [DVector<f64>; 3],
}

struct Activations {
    x: DVector<f64>,
    h1: DVector<f64>,
    h2: DVector<f64>,
    out: DVector<f64>,
}

impl Net {
    fn from_params(p: &RegressorParams) -> Self {
        Net {
            w: [
                p.layers[0].matrix(),
                p.layers[1].matrix(),
                p.layers[2].matrix(),
            ],
            b: [
                DVector::from_vec(p.layers[0].bias.clone()),
                DVector::from_vec(p.layers[1].bias.clone()),
                DVector::from_vec(p.layers[2].bias.clone()),
            ],
        }
    }

    fn write_into(&self, p: &mut RegressorParams) {
        for (l, layer) in p.layers.iter_mut().enumerate() {
            for (r, row) in layer.weights.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = self.w[l][(r, c)];
                }
            }
            layer.bias.copy_from_slice(self.b[l].as_slice());
        }
    }

    fn forward(&self, x: DVector<f64>) -> Activations {
        let h1 = (&self.w[0] * &x + &self.b[0]).map(f64::tanh);
        let h2 = (&self.w[1] * &h1 + &self.b[1]).map(f64::tanh);
        let out = &self.w[2] * &h2 + &self.b[2];
        Activations { x, h1, h2, out }
    }

    fn len(&self) -> usize {
        self.w.iter().map(|w| w.len()).sum::<usize>()
            + self.b.iter().map(|b| b.len()).sum::<usize>()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for l in 0..3 {
            v.extend_from_slice(self.w[l].as_slice());
            v.extend_from_slice(self.b[l].as_slice());
        }
        v
    }

    fn unflatten(&mut self, v: &[f64]) {
        let mut at = 0;
        for l in 0..3 {
            let n = self.w[l].len();
            self.w[l].as_mut_slice().copy_from_slice(&v[at..at + n]);
            at += n;
            let n = self.b[l].len();
            self.b[l].as_mut_slice().copy_from_slice(&v[at..at + n]);
            at += n;
        }
    }
}

impl RegressorParams {
    fn input(&self, pose: &Transform3) -> DVector<f64> {
        let raw = encode(pose);
        DVector::from_iterator(
            INPUT_DIM,
            (0..INPUT_DIM).map(|i| (raw[i] - self.input_mean[i]) / self.input_std[i]),
        )
    }

    fn decode(&self, out: &DVector<f64>) -> Result<(PolarFactor, Vec3)> {
        let m = Mat3::from_row_slice(&out.as_slice()[..9]);
        let polar = PolarFactor::new(&m)?;
        let t = Vec3::from(self.translation_mean)
            + self.translation_scale * Vec3::new(out[9], out[10], out[11]);
        Ok((polar, t))
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [(HIDDEN, INPUT_DIM), (HIDDEN, HIDDEN), (OUTPUT_DIM, HIDDEN)];
        if self.layers.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "expected 3 layers, got {}",
                self.layers.len()
            )));
        }
        for (l, (layer, (rows, cols))) in self.layers.iter().zip(shapes).enumerate() {
            if layer.weights.len() != rows
                || layer.weights.iter().any(|r| r.len() != cols)
                || layer.bias.len() != rows
            {
                return Err(Error::InvalidInput(format!(
                    "layer {l} is not {rows}x{cols}"
                )));
            }
        }
        if self.input_mean.len() != INPUT_DIM || self.input_std.len() != INPUT_DIM {
            return Err(Error::InvalidInput(
                "normalization has the wrong length".into(),
            ));
        }
        let finite = self
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().flatten().chain(&l.bias))
            .chain(&self.input_mean)
            .chain(&self.input_std)
            .chain(&self.translation_mean)
            .all(|v| v.is_finite());
        if !finite || !(self.translation_scale > 0.0) || self.input_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidInput(
                "regressor parameters are not finite".into(),
            ));
        }
        Ok(())
    }
}

fn init_params(ee_poses: &[Transform3], targets: &[Transform3], seed: u64) -> RegressorParams {
    let n = ee_poses.len() as f64;
    let encoded: Vec<[f64; INPUT_DIM]> = ee_poses.iter().map(encode).collect();
    let mut mean = vec![0.0; INPUT_DIM];
    let mut std = vec![0.0; INPUT_DIM];
    for e in &encoded {
        for i in 0..INPUT_DIM {
            mean[i] += e[i] / n;
        }
    }
    for e in &encoded {
        for i in 0..INPUT_DIM {
            std[i] += (e[i] - mean[i]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if s.sqrt() > 1e-9 { s.sqrt() } else { 1.0 };
    }
    let t_mean: Vec3 = targets.iter().map(|t| t.translation).sum::<Vec3>() / n;
    let t_var = targets
        .iter()
        .map(|t| (t.translation - t_mean).norm_squared())
        .sum::<f64>()
        / n;
    let t_scale = if t_var.sqrt() > 1e-9 {
        t_var.sqrt()
    } else {
        t_mean.norm().max(1.0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |rows: usize, cols: usize| {
        let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("valid normal");
        Layer {
            weights: (0..rows)
                .map(|_| (0..cols).map(|_| normal.sample(&mut rng)).collect())
                .collect(),
            bias: vec![0.0; rows],
        }
    };
    let mut layers = vec![
        layer(HIDDEN, INPUT_DIM),
        layer(HIDDEN, HIDDEN),
        layer(OUTPUT_DIM, HIDDEN),
    ];
    // Start the output at the mean target pose.
    let r_mean: Mat3 = targets.iter().map(|t| *t.rotation.matrix()).sum::<Mat3>() / n;
    for r in 0..3 {
        for c in 0..3 {
            layers[2].bias[3 * r + c] = r_mean[(r, c)];
        }
    }
    RegressorParams {
        layers,
        input_mean: mean,
        input_std: std,
        translation_mean: t_mean.into(),
        translation_scale: t_scale,
    }
}

/// Mean `se3_distance` over the training set and its gradient.
fn training_loss(
    net: &Net,
    params: &RegressorParams,
    inputs: &[DVector<f64>],
    targets: &[Transform3],
    rot_weight: f64,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let inv_n = 1.0 / inputs.len() as f64;
    let mut loss = 0.0;
    let mut gw = [
        DMatrix::zeros(net.w[0].nrows(), net.w[0].ncols()),
        DMatrix::zeros(net.w[1].nrows(), net.w[1].ncols()),
        DMatrix::zeros(net.w[2].nrows(), net.w[2].ncols()),
    ];
    let mut gb = [
        DVector::zeros(net.b[0].len()),
        DVector::zeros(net.b[1].len()),
        DVector::zeros(net.b[2].len()),
    ];
    for (x, target) in inputs.iter().zip(targets) {
        let act = net.forward(x.clone());
        let (polar, t) = params.decode(&act.out)?;
        let (theta, g_r) = angle_and_grad(&polar.rotation, target.rotation.matrix());
        let diff = t - target.translation;
        let dist = diff.norm();
        loss += (rot_weight * theta + dist) * inv_n;
        if !with_grad {
            continue;
        }
        let g_m = polar.adjoint(&(g_r * rot_weight));
        let u = if dist > 0.0 {
            diff / dist
        } else {
            Vec3::zeros()
        };
        let mut d_out = DVector::zeros(OUTPUT_DIM);
        for r in 0..3 {
            for c in 0..3 {
                d_out[3 * r + c] = g_m[(r, c)];
            }
            d_out[9 + r] = u[r] * params.translation_scale;
        }
        d_out *= inv_n;
        gw[2] += &d_out * act.h2.transpose();
        gb[2] += &d_out;
        let d_h2 = (net.w[2].transpose() * &d_out).component_mul(&act.h2.map(|h| 1.0 - h * h));
        gw[1] += &d_h2 * act.h1.transpose();
        gb[1] += &d_h2;
        let d_h1 = (net.w[1].transpose() * &d_h2).component_mul(&act.h1.map(|h| 1.0 - h * h));
        gw[0] += &d_h1 * act.x.transpose();
        gb[0] += &d_h1;
    }
    let mut grad = Vec::with_capacity(net.len());
    if with_grad {
        for l in 0..3 {
            grad.extend_from_slice(gw[l].as_slice());
            grad.extend_from_slice(gb[l].as_slice());
        }
    }
    Ok((loss, grad))
}

/// Per-iteration record of a regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    /// Loss after each accepted step, starting with the initial loss.
    pub accepted_losses: Vec<f64>,
}

/// Fits the regressor from end-effector poses to camera-object poses.
pub fn train_direct(
    ee_poses: &[Transform3],
    cam_obj_poses: &[CameraObjectPose],
    opts: &RegressorOptions,
) -> Result<(RegressorParams, TrainingTrace)> {
    if ee_poses.is_empty() || ee_poses.len() != cam_obj_poses.len() {
        return Err(Error::SizeMismatch(format!(
            "{} end-effector poses and {} object poses",
            ee_poses.len(),
            cam_obj_poses.len()
        )));
    }
    let targets: Vec<Transform3> = cam_obj_poses
        .iter()
        .map(CameraObjectPose::to_transform)
        .collect();
    let mut params = init_params(ee_poses, &targets, opts.seed);
    let inputs: Vec<DVector<f64>> = ee_poses.iter().map(|e| params.input(e)).collect();
    let mut net = Net::from_params(&params);
    let mut flat = net.flatten();
    let (mut loss, mut grad) =
        training_loss(&net, &params, &inputs, &targets, opts.rot_weight, true)?;
    let mut trace = TrainingTrace {
        accepted_losses: vec![loss],
    };
    let lrs = vec![opts.learning_rate; flat.len()];
    let mut adam = Adam::new(flat.len());
    let mut backoff = 1.0;
    for iter in 0..opts.iterations {
        let step = adam.step(
            &grad,
            &lrs,
            backoff * cosine_factor(iter, opts.iterations, 1e-3),
        );
        let candidate: Vec<f64> = flat.iter().zip(&step).map(|(a, b)| a + b).collect();
        net.unflatten(&candidate);
        match training_loss(&net, &params, &inputs, &targets, opts.rot_weight, true) {
            Ok((l, g)) if l <= loss => {
                flat = candidate;
                loss = l;
                grad = g;
                trace.accepted_losses.push(l);
                backoff = (backoff * 1.05).min(1.0);
            }
            Ok(_) | Err(Error::NonProjectable(_)) => {
                net.unflatten(&flat);
                backoff *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    net.unflatten(&flat);
    net.write_into(&mut params);
    log::info!("direct regression: final training loss {loss:.6e}");
    Ok((params, trace))
}

/// Forward pass with the rotation block projected onto SO(3).
pub fn predict_direct(params: &RegressorParams, ee_pose: &Transform3) -> Result<Transform3> {
    let net = Net::from_params(params);
    let act = net.forward(params.input(ee_pose));
    let (polar, t) = params.decode(&act.out)?;
    Ok(Transform3::new(
        Rotation3::from_matrix_unchecked(polar.rotation),
        t,
    ))
}

/// Mean per-point pixel distance between the reconstruction placed by the
/// regressor and by the observed poses, per training pose.
pub fn regression_residuals(
    params: &RegressorParams,
    problem: &AlignmentProblem,
) -> Result<Vec<f64>> {
    let k = &problem.intrinsics;
    problem
        .ee_poses
        .iter()
        .zip(&problem.cam_obj_poses)
        .map(|(e, c)| {
            let pred = predict_direct(params, e)?;
            let obs = c.to_transform();
            let mut sum = 0.0;
            let mut count = 0usize;
            for x in problem
                .dense
                .points
                .iter()
                .step_by(problem.render_subsample)
            {
                let (a, b) = (pred.apply(x), obs.apply(x));
                if a.z > DEPTH_EPSILON && b.z > DEPTH_EPSILON {
                    let du = k.fx * (a.x / a.z - b.x / b.z);
                    let dv = k.fy * (a.y / a.z - b.y / b.z);
                    sum += du.hypot(dv);
                    count += 1;
                }
            }
            Ok(if count > 0 {
                sum / count as f64
            } else {
                f64::INFINITY
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{exp_so3, se3_distance};

    fn pose(angle: f64, t: [f64; 3]) -> Transform3 {
        Transform3::new(
            Rotation3::from_axis_angle(&Vec3::new(1.0, -1.0, 2.0).normalize(), angle),
            Vec3::from(t),
        )
    }

    #[test]
    fn angle_gradient_matches_finite_differences() {
        let r = *pose(0.7, [0.0; 3]).rotation.matrix();
        let target = *pose(0.2, [0.0; 3]).rotation.matrix();
        let (theta, g) = angle_and_grad(&r, &target);
        assert!((theta - 0.5).abs() < 1e-12);
        let f = |m: Mat3| geodesic_angle(&(target.transpose() * m));
        for w in [Vec3::new(0.3, -0.1, 0.2), Vec3::new(0.0, 1.0, 0.0)] {
            let h = 1e-6;
            let dm = r * crate::se3::skew(&w);
            let fd = (f(r * exp_so3(&(w * h))) - f(r * exp_so3(&(-w * h)))) / (2.0 * h);
            assert!((g.dot(&dm) - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn single_pair_is_memorized() {
        let ee = [pose(0.3, [0.4, 0.1, 0.3])];
        let target = CameraObjectPose::from_camera_pose(&pose(-0.8, [0.1, 0.2, -0.9]));
        let (params, trace) = train_direct(&ee, &[target], &RegressorOptions::default()).unwrap();
        params.validate().unwrap();
        let pred = predict_direct(&params, &ee[0]).unwrap();
        assert!(se3_distance(&pred, &target.to_transform(), 1.0) < 1e-3);
        assert!(trace.accepted_losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn regressor_json_round_trip() {
        let ee = [pose(0.3, [0.4, 0.1, 0.3]), pose(0.5, [0.3, 0.0, 0.4])];
        let targets = [
            CameraObjectPose::from_camera_pose(&pose(0.1, [0.0, 0.0, -1.0])),
            CameraObjectPose::from_camera_pose(&pose(0.2, [0.1, 0.0, -1.0])),
        ];
        let opts = RegressorOptions {
            iterations: 10,
            ..Default::default()
        };
        let (params, _) = train_direct(&ee, &targets, &opts).unwrap();
        let text = serde_json::to_string(&params).unwrap();
        let back: RegressorParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, params);
        let a = predict_direct(&params, &ee[0]).unwrap();
        let b = predict_direct(&params, &pose(0.3001, [0.4, 0.1, 0.3001])).unwrap();
        assert!(se3_distance(&a, &b, 1.0) < 1e-2);
    }
}
