//! Recovery of the fixed end-effector-to-object transform `H` and the metric
//! scale `α` from recorded end-effector poses and unscaled camera-object
//! poses.
//!
//! Because the camera never moves relative to the base, the products
//! `E_n · H · C_n(α)` agree for every pose `n`. Each `C_n` can therefore be
//! predicted from all the others,
//!
//! ```text
//! f_n(H, α) = mean_{m≠n} (H⁻¹ A_{n,m} H) C_m(α),   A_{n,m} = E_n⁻¹ E_m,
//! ```
//!
//! followed by projection of the rotation block onto SO(3). The loss renders
//! the metrically scaled reconstruction under `f_n` and under the observed
//! pose, and averages the per-point pixel distances.

use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ope::CameraObjectPose;
use crate::optim::{cosine_factor, Adam};
use crate::ply;
use crate::se3::{
    procrustes_project, row_major, se3_distance, DenseCloud, Intrinsics, Mat3, Mat4, PolarFactor,
    Rotation3, Transform3, Vec3,
};

pub type Vec2 = Vector2<f64>;

/// Points closer to the image plane than this are rejected.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Inputs of the coordinate-alignment problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentProblem {
    /// End-effector poses `E_n` in meters.
    pub ee_poses: Vec<Transform3>,
    /// Unscaled camera-object poses, the blocks of `P̄_n⁻¹`.
    pub cam_obj_poses: Vec<CameraObjectPose>,
    /// Reconstruction in gauge units.
    pub dense: DenseCloud,
    pub intrinsics: Intrinsics,
    /// Only every `render_subsample`-th point enters the loss.
    pub render_subsample: usize,
}

impl AlignmentProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.ee_poses.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 poses, got {n}"
            )));
        }
        if self.cam_obj_poses.len() != n {
            return Err(Error::SizeMismatch(format!(
                "{n} end-effector poses but {} camera-object poses",
                self.cam_obj_poses.len()
            )));
        }
        let finite = |t: &Transform3| t.to_row_major().iter().all(|v| v.is_finite());
        if !self.ee_poses.iter().all(finite)
            || !self.cam_obj_poses.iter().all(|p| finite(&p.to_transform()))
        {
            return Err(Error::InvalidInput("non-finite pose".into()));
        }
        if self.render_subsample == 0 {
            return Err(Error::InvalidInput(
                "render_subsample must be positive".into(),
            ));
        }
        self.intrinsics.validate()?;
        self.dense.validate()
    }

    pub fn len(&self) -> usize {
        self.ee_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ee_poses.is_empty()
    }

    fn sampled_points(&self) -> Vec<Vec3> {
        self.dense
            .points
            .iter()
            .step_by(self.render_subsample)
            .copied()
            .collect()
    }

    /// Same problem restricted to the poses in `keep`.
    pub fn select(&self, keep: &[usize]) -> AlignmentProblem {
        AlignmentProblem {
            ee_poses: keep.iter().map(|&i| self.ee_poses[i]).collect(),
            cam_obj_poses: keep.iter().map(|&i| self.cam_obj_poses[i]).collect(),
            ..self.clone()
        }
    }
}

/// `A_{n,m} = E_n⁻¹ E_m`.
pub fn relative_ee(n: usize, m: usize, ee_poses: &[Transform3]) -> Result<Transform3> {
    let (a, b) = match (ee_poses.get(n), ee_poses.get(m)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidInput(format!(
                "pose index ({n}, {m}) out of range for {} poses",
                ee_poses.len()
            )))
        }
    };
    Ok(a.inverse().compose(b))
}

/// Raw optimization variables: an unconstrained rotation block, the
/// translation of `H`, and `log α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawParams {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub log_alpha: f64,
}

pub const N_RAW: usize = 13;

impl RawParams {
    pub fn new(h: &Transform3, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "scale must be positive, got {alpha}"
            )));
        }
        Ok(RawParams {
            rotation: *h.rotation.matrix(),
            translation: h.translation,
            log_alpha: alpha.ln(),
        })
    }

    pub fn to_array(&self) -> [f64; N_RAW] {
        let mut out = [0.0; N_RAW];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.rotation[(r, c)];
            }
        }
        out[9..12].copy_from_slice(self.translation.as_slice());
        out[12] = self.log_alpha;
        out
    }

    pub fn from_array(v: &[f64; N_RAW]) -> Self {
        RawParams {
            rotation: Mat3::from_row_slice(&v[..9]),
            translation: Vec3::new(v[9], v[10], v[11]),
            log_alpha: v[12],
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn h_matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `H` with its rotation block projected onto SO(3).
    pub fn to_transform(&self) -> Result<Transform3> {
        Ok(Transform3::new(
            procrustes_project(&self.rotation)?,
            self.translation,
        ))
    }
}

fn h_inverse(h: &Mat4) -> Result<Mat4> {
    h.try_inverse()
        .ok_or_else(|| Error::InvalidInput("rotation block of H is singular".into()))
}

/// Estimated pose `f_n` with its derivatives along the 13 raw directions.
pub(crate) struct EstimatorJet {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub d_rotation: [Mat3; N_RAW],
    pub d_translation: [Vec3; N_RAW],
}

fn unit_direction(k: usize, params: &RawParams) -> (Mat4, f64) {
    let mut dh = Mat4::zeros();
    match k {
        0..=8 => dh[(k / 3, k % 3)] = 1.0,
        9..=11 => dh[(k - 9, 3)] = 1.0,
        _ => return (dh, params.alpha()),
    }
    (dh, 0.0)
}

/// Centroid of the reconstruction in gauge units.
fn dense_centroid(problem: &AlignmentProblem) -> Vec3 {
    let pts = &problem.dense.points;
    pts.iter().sum::<Vec3>() / pts.len().max(1) as f64
}

/// `f_n` for every pose together with its tangents. `cam_obj` are the
/// unscaled poses; the scale enters through their translations. After the
/// rotation block is projected, the translation is chosen so the pose maps
/// the scaled reconstruction centroid where the averaged transform does,
/// which keeps the estimate covariant under rigid re-gauging.
pub(crate) fn estimator_jets(
    params: &RawParams,
    problem: &AlignmentProblem,
    with_tangents: bool,
) -> Result<Vec<EstimatorJet>> {
    let n = problem.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 poses, got {n}"
        )));
    }
    let alpha = params.alpha();
    let h = params.h_matrix();
    let h_inv = h_inverse(&h)?;
    let ee: Vec<Mat4> = problem.ee_poses.iter().map(Transform3::to_matrix).collect();
    let ee_inv: Vec<Mat4> = problem
        .ee_poses
        .iter()
        .map(|e| e.inverse().to_matrix())
        .collect();
    let cam: Vec<Mat4> = problem
        .cam_obj_poses
        .iter()
        .map(|p| Transform3::new(p.rotation, alpha * p.translation).to_matrix())
        .collect();
    // d C_m / d log α only touches the translation column.
    let d_cam: Vec<Mat4> = problem
        .cam_obj_poses
        .iter()
        .map(|p| {
            let mut d = Mat4::zeros();
            d.fixed_view_mut::<3, 1>(0, 3)
                .copy_from(&(alpha * p.translation));
            d
        })
        .collect();
    let hc: Vec<Mat4> = cam.iter().map(|c| h * c).collect();
    let scale = 1.0 / (n - 1) as f64;
    let anchor = alpha * dense_centroid(problem);

    (0..n)
        .map(|i| {
            // Q_n = mean_{m≠n} A_{n,m} H C_m, so that S_n = H⁻¹ Q_n.
            let mut q = Mat4::zeros();
            for m in (0..n).filter(|&m| m != i) {
                q += ee_inv[i] * ee[m] * hc[m];
            }
            q *= scale;
            let s = h_inv * q;
            let rot_block: Mat3 = s.fixed_view::<3, 3>(0, 0).into_owned();
            let polar = PolarFactor::new(&rot_block)?;
            let offset = (rot_block - polar.rotation) * anchor;
            let translation = s.fixed_view::<3, 1>(0, 3).into_owned() + offset;
            let mut jet = EstimatorJet {
                rotation: polar.rotation,
                translation,
                d_rotation: [Mat3::zeros(); N_RAW],
                d_translation: [Vec3::zeros(); N_RAW],
            };
            if !with_tangents {
                return Ok(jet);
            }
            for k in 0..N_RAW {
                let (dh, dlog_alpha) = unit_direction(k, params);
                let mut dq = Mat4::zeros();
                for m in (0..n).filter(|&m| m != i) {
                    let a = ee_inv[i] * ee[m];
                    if dlog_alpha != 0.0 {
                        dq += a * h * d_cam[m];
                    } else {
                        dq += a * dh * cam[m];
                    }
                }
                dq *= scale;
                let ds = if dlog_alpha != 0.0 {
                    h_inv * dq
                } else {
                    -(h_inv * dh * h_inv) * q + h_inv * dq
                };
                let ds_rot: Mat3 = ds.fixed_view::<3, 3>(0, 0).into_owned();
                let dp = polar.tangent(&ds_rot);
                let mut dt = ds.fixed_view::<3, 1>(0, 3).into_owned() + (ds_rot - dp) * anchor;
                if dlog_alpha != 0.0 {
                    dt += offset;
                }
                jet.d_rotation[k] = dp;
                jet.d_translation[k] = dt;
            }
            Ok(jet)
        })
        .collect()
}

/// Estimated camera-object pose `f_n(H, α)`.
pub fn estimator(
    n: usize,
    h: &Transform3,
    alpha: f64,
    problem: &AlignmentProblem,
) -> Result<Transform3> {
    if n >= problem.len() {
        return Err(Error::InvalidInput(format!("pose {n} out of range")));
    }
    if problem.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 poses".into()));
    }
    let params = RawParams::new(h, alpha)?;
    let jets = estimator_jets(&params, problem, false)?;
    Ok(Transform3::new(
        Rotation3::from_matrix_unchecked(jets[n].rotation),
        jets[n].translation,
    ))
}

fn project_point(k: &Intrinsics, p: &Vec3) -> Vec2 {
    Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Perspective projection `(u/w, v/w)` of `[u, v, w]ᵀ = K x` for each row,
/// in input order.
pub fn project(k: &Intrinsics, cloud: &DenseCloud) -> Result<Vec<Vec2>> {
    project_points(k, &cloud.points, None)
}

fn project_points(k: &Intrinsics, points: &[Vec3], pose: Option<usize>) -> Result<Vec<Vec2>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if !(p.z > DEPTH_EPSILON) {
                return Err(Error::BehindCamera {
                    pose,
                    index,
                    depth: p.z,
                });
            }
            Ok(project_point(k, p))
        })
        .collect()
}

/// Per-pose projections of the observed reconstruction, the fixed target of
/// the rendered loss.
struct RenderTargets {
    points: Vec<Vec3>,
    pixels: Vec<Vec<Vec2>>,
}

impl RenderTargets {
    fn new(problem: &AlignmentProblem) -> Result<Self> {
        let points = problem.sampled_points();
        let pixels = problem
            .cam_obj_poses
            .iter()
            .enumerate()
            .map(|(n, pose)| {
                let t = pose.to_transform();
                let moved: Vec<Vec3> = points.iter().map(|p| t.apply(p)).collect();
                project_points(&problem.intrinsics, &moved, Some(n))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RenderTargets { points, pixels })
    }
}

struct PoseTerm {
    loss: f64,
    grad: [f64; N_RAW],
}

/// Sum over points of the pixel distances for pose `n`, with the gradient
/// along the raw directions when `jet` carries tangents.
fn pose_term(
    n: usize,
    jet: &EstimatorJet,
    alpha: f64,
    targets: &RenderTargets,
    k: &Intrinsics,
    with_grad: bool,
) -> Result<PoseTerm> {
    let mut loss = 0.0;
    let mut g_rot = Mat3::zeros();
    let mut g_trans = Vec3::zeros();
    let mut g_alpha_direct = 0.0;
    for (index, (x, target)) in targets.points.iter().zip(&targets.pixels[n]).enumerate() {
        let ax = alpha * x;
        let rx = jet.rotation * ax;
        let y = rx + jet.translation;
        if !(y.z > DEPTH_EPSILON) {
            return Err(Error::BehindCamera {
                pose: Some(n),
                index,
                depth: y.z,
            });
        }
        let px = project_point(k, &y);
        let r = px - target;
        let d = r.norm();
        loss += d;
        if !with_grad || d == 0.0 {
            continue;
        }
        let u = r / d;
        let iz = 1.0 / y.z;
        // Jᵀ u with J the Jacobian of the projection at y.
        let g = Vec3::new(
            k.fx * iz * u.x,
            k.fy * iz * u.y,
            -(k.fx * y.x * u.x + k.fy * y.y * u.y) * iz * iz,
        );
        g_rot += g * ax.transpose();
        g_trans += g;
        g_alpha_direct += g.dot(&rx);
    }
    let mut grad = [0.0; N_RAW];
    if with_grad {
        for (kk, slot) in grad.iter_mut().enumerate() {
            *slot = g_rot.dot(&jet.d_rotation[kk]) + g_trans.dot(&jet.d_translation[kk]);
        }
        grad[12] += g_alpha_direct;
    }
    Ok(PoseTerm { loss, grad })
}

fn evaluate(
    params: &RawParams,
    problem: &AlignmentProblem,
    targets: &RenderTargets,
    with_grad: bool,
) -> Result<(f64, [f64; N_RAW], Vec<f64>)> {
    let jets = estimator_jets(params, problem, with_grad)?;
    let alpha = params.alpha();
    let terms: Vec<PoseTerm> = jets
        .par_iter()
        .enumerate()
        .map(|(n, jet)| pose_term(n, jet, alpha, targets, &problem.intrinsics, with_grad))
        .collect::<Result<_>>()?;
    let count = targets.points.len().max(1) as f64;
    let norm = 1.0 / (count * problem.len() as f64);
    let mut loss = 0.0;
    let mut grad = [0.0; N_RAW];
    let mut per_pose = Vec::with_capacity(terms.len());
    for t in &terms {
        loss += t.loss * norm;
        per_pose.push(t.loss / count);
        for (g, tg) in grad.iter_mut().zip(&t.grad) {
            *g += tg * norm;
        }
    }
    Ok((loss, grad, per_pose))
}

/// Mean pixel distance between the reconstruction rendered under `f_n(H, α)`
/// (scaled to meters by `α`) and under the observed pose, over all poses and
/// sampled points.
pub fn loss(h: &Transform3, alpha: f64, problem: &AlignmentProblem) -> Result<f64> {
    problem.validate()?;
    let params = RawParams::new(h, alpha)?;
    let targets = RenderTargets::new(problem)?;
    Ok(evaluate(&params, problem, &targets, false)?.0)
}

/// Per-pose mean pixel distances at `(H, α)`.
pub fn per_pose_residuals(
    h: &Transform3,
    alpha: f64,
    problem: &AlignmentProblem,
) -> Result<Vec<f64>> {
    problem.validate()?;
    let params = RawParams::new(h, alpha)?;
    let targets = RenderTargets::new(problem)?;
    Ok(evaluate(&params, problem, &targets, false)?.2)
}

/// Loss and its gradient with respect to the 13 raw parameters.
pub fn loss_and_grad(
    params: &RawParams,
    problem: &AlignmentProblem,
) -> Result<(f64, [f64; N_RAW])> {
    problem.validate()?;
    let targets = RenderTargets::new(problem)?;
    let (l, g, _) = evaluate(params, problem, &targets, true)?;
    Ok((l, g))
}

/// Objective driven by [`minimize`]. The rendered loss is one instance; the
/// pose-space baseline is another.
pub(crate) trait Objective: Sync {
    fn value_and_grad(&self, params: &RawParams) -> Result<(f64, [f64; N_RAW])>;
}

pub(crate) struct RenderedObjective<'a> {
    pub problem: &'a AlignmentProblem,
    targets: RenderTargets,
}

impl<'a> RenderedObjective<'a> {
    pub fn new(problem: &'a AlignmentProblem) -> Result<Self> {
        Ok(RenderedObjective {
            problem,
            targets: RenderTargets::new(problem)?,
        })
    }
}

impl Objective for RenderedObjective<'_> {
    fn value_and_grad(&self, params: &RawParams) -> Result<(f64, [f64; N_RAW])> {
        let (l, g, _) = evaluate(params, self.problem, &self.targets, true)?;
        Ok((l, g))
    }
}

/// Knobs of the coordinate-alignment solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSolverOptions {
    /// Step size for the rotation block and translation of `H`.
    pub lr_pose: f64,
    pub lr_log_alpha: f64,
    pub max_iters: usize,
    /// Final step size as a fraction of the initial one.
    pub lr_floor: f64,
    /// Number of initial rotations tried; the first is the identity.
    pub n_starts: usize,
    pub seed: u64,
    /// Subsampling used during optimization; the final loss uses every point.
    pub render_subsample: usize,
    /// A start whose loss exceeds this is abandoned as diverged.
    pub divergence_threshold: f64,
    /// Weight of the rotation angle in the pose-space baseline, meters per radian.
    pub rot_weight: f64,
}

impl Default for AlignSolverOptions {
    fn default() -> Self {
        AlignSolverOptions {
            lr_pose: 1e-2,
            lr_log_alpha: 5e-3,
            max_iters: 2000,
            lr_floor: 0.0,
            n_starts: 4,
            seed: 0,
            render_subsample: 8,
            divergence_threshold: 1e6,
            rot_weight: 1.0,
        }
    }
}

/// Camera-to-base transform implied by a solution, averaged over poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraBase {
    pub transform: Transform3,
    /// Largest `se3_distance` (unit rotation weight) of a per-pose product
    /// from the mean.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSolution {
    pub h: Transform3,
    pub alpha: f64,
    /// Rendered loss with every point, in pixels.
    pub final_loss: f64,
    pub per_pose_residuals: Vec<f64>,
    pub cam_base: CameraBase,
    /// Best objective value reached by each start.
    pub start_losses: Vec<f64>,
}

/// `α` seed: ratio of the median end-effector translation spread to the
/// median camera-frame translation spread.
pub fn initial_alpha(problem: &AlignmentProblem) -> f64 {
    let n = problem.len();
    let mut ee = Vec::new();
    let mut cam = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            ee.push((problem.ee_poses[i].translation - problem.ee_poses[j].translation).norm());
            cam.push(
                (problem.cam_obj_poses[i].translation - problem.cam_obj_poses[j].translation)
                    .norm(),
            );
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let ratio = median(&mut ee) / median(&mut cam);
    if ratio.is_finite() && ratio > 0.0 {
        ratio
    } else {
        1.0
    }
}

/// Initial rotations: identity first, then seeded uniform random rotations.
pub(crate) fn start_rotations(n_starts: usize, seed: u64) -> Vec<Mat3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Mat3::identity()];
    while out.len() < n_starts.max(1) {
        // Uniform quaternion on S³.
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let tau = std::f64::consts::TAU;
        let q = nalgebra::Quaternion::new(
            u1.sqrt() * (tau * u3).cos(),
            (1.0 - u1).sqrt() * (tau * u2).sin(),
            (1.0 - u1).sqrt() * (tau * u2).cos(),
            u1.sqrt() * (tau * u3).sin(),
        );
        out.push(
            *nalgebra::UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .matrix(),
        );
    }
    out
}

/// Adam over the raw parameters from several initial rotations, projecting
/// the rotation block onto SO(3) after every step. Returns the best iterate
/// over all starts and the best value reached by each start.
pub(crate) fn minimize(
    objective: &dyn Objective,
    problem: &AlignmentProblem,
    opts: &AlignSolverOptions,
) -> Result<(RawParams, Vec<f64>)> {
    let alpha0 = initial_alpha(problem);
    let mut lrs = [opts.lr_pose; N_RAW];
    lrs[12] = opts.lr_log_alpha;

    let mut best: Option<(f64, RawParams)> = None;
    let mut start_losses = Vec::new();
    let mut failures = Vec::new();
    for (s, rot) in start_rotations(opts.n_starts, opts.seed)
        .into_iter()
        .enumerate()
    {
        let mut params = RawParams {
            rotation: rot,
            translation: Vec3::zeros(),
            log_alpha: alpha0.ln(),
        };
        let (mut value, mut grad) = match objective.value_and_grad(&params) {
            Ok(v) if v.0 <= opts.divergence_threshold => v,
            Ok(v) => {
                failures.push(format!("start {s}: initial loss {:.3e}", v.0));
                start_losses.push(f64::INFINITY);
                continue;
            }
            Err(e) => {
                failures.push(format!("start {s}: {e}"));
                start_losses.push(f64::INFINITY);
                continue;
            }
        };
        let mut start_best = (value, params);
        let mut adam = Adam::new(N_RAW);
        let mut backoff = 1.0;
        let mut diverged = false;
        for iter in 0..opts.max_iters {
            let step = adam.step(
                &grad,
                &lrs,
                backoff * cosine_factor(iter, opts.max_iters, opts.lr_floor),
            );
            let mut flat = params.to_array();
            for (p, d) in flat.iter_mut().zip(&step) {
                *p += d;
            }
            let mut candidate = RawParams::from_array(&flat);
            candidate.rotation = match procrustes_project(&candidate.rotation) {
                Ok(r) => *r.matrix(),
                Err(_) => {
                    backoff *= 0.5;
                    continue;
                }
            };
            match objective.value_and_grad(&candidate) {
                Ok((v, g)) => {
                    if v > opts.divergence_threshold || !v.is_finite() {
                        diverged = true;
                        failures.push(format!("start {s}: loss {v:.3e} at iteration {iter}"));
                        break;
                    }
                    params = candidate;
                    value = v;
                    grad = g;
                    if value < start_best.0 {
                        start_best = (value, params);
                    }
                }
                // A step that pushes points behind the camera is retried shorter.
                Err(Error::BehindCamera { .. }) => backoff *= 0.5,
                Err(e) => return Err(e),
            }
            if iter % 500 == 0 {
                debug!(
                    "start {s} iter {iter}: loss {value:.6e}, alpha {:.6}",
                    params.alpha()
                );
            }
        }
        if diverged && !start_best.0.is_finite() {
            start_losses.push(f64::INFINITY);
            continue;
        }
        debug!("start {s}: best loss {:.6e}", start_best.0);
        start_losses.push(start_best.0);
        if best.as_ref().is_none_or(|b| start_best.0 < b.0) {
            best = Some(start_best);
        }
    }
    for f in &failures {
        warn!("{f}");
    }
    match best {
        Some((_, p)) => Ok((p, start_losses)),
        None => Err(Error::Divergence(failures.join("; "))),
    }
}

/// Minimizes the rendered loss over `H ∈ SE(3)` and `α > 0`.
pub fn solve(problem: &AlignmentProblem, opts: &AlignSolverOptions) -> Result<AlignmentSolution> {
    problem.validate()?;
    let mut working = problem.clone();
    working.render_subsample = opts.render_subsample.max(1);
    let objective = RenderedObjective::new(&working)?;
    let (params, start_losses) = minimize(&objective, &working, opts)?;
    finish(params, problem, start_losses)
}

/// Builds the solution report at `params`, evaluating the loss on every point.
pub(crate) fn finish(
    params: RawParams,
    problem: &AlignmentProblem,
    start_losses: Vec<f64>,
) -> Result<AlignmentSolution> {
    let h = params.to_transform()?;
    let alpha = params.alpha();
    let mut full = problem.clone();
    full.render_subsample = 1;
    let per_pose = per_pose_residuals(&h, alpha, &full)?;
    let final_loss = per_pose.iter().sum::<f64>() / per_pose.len() as f64;
    let cam_base = camera_base_at(&h, alpha, problem)?;
    info!(
        "solution: alpha {alpha:.6}, loss {final_loss:.6} px, cam_base spread {:.3e}",
        cam_base.spread
    );
    Ok(AlignmentSolution {
        h,
        alpha,
        final_loss,
        per_pose_residuals: per_pose,
        cam_base,
        start_losses,
    })
}

/// Arithmetic mean of rigid transforms with the rotation block projected.
/// The result maps `anchor` where the averaged affine map does.
pub(crate) fn mean_transform(ts: &[Transform3], anchor: &Vec3) -> Result<Transform3> {
    let inv = 1.0 / ts.len() as f64;
    let rot: Mat3 = ts.iter().map(|t| *t.rotation.matrix()).sum::<Mat3>() * inv;
    let trans: Vec3 = ts.iter().map(|t| t.translation).sum::<Vec3>() * inv;
    let projected = procrustes_project(&rot)?;
    let offset = (rot - projected.matrix()) * anchor;
    Ok(Transform3::new(projected, trans + offset))
}

fn camera_base_at(h: &Transform3, alpha: f64, problem: &AlignmentProblem) -> Result<CameraBase> {
    let products = problem
        .ee_poses
        .iter()
        .zip(&problem.cam_obj_poses)
        .map(|(e, c)| Ok(e.compose(h).compose(&c.scaled_pose(alpha)?)))
        .collect::<Result<Vec<_>>>()?;
    let transform = mean_transform(&products, &(alpha * dense_centroid(problem)))?;
    let spread = products
        .iter()
        .map(|p| se3_distance(p, &transform, 1.0))
        .fold(0.0, f64::max);
    Ok(CameraBase { transform, spread })
}

/// Pose-averaged `E_n · H · C_n(α)` and its spread.
pub fn camera_base(solution: &AlignmentSolution, problem: &AlignmentProblem) -> Result<CameraBase> {
    camera_base_at(&solution.h, solution.alpha, problem)
}

/// Camera-object pose at an unseen end-effector pose `ee_pose`, averaged
/// over the contributions of every pose in `problem`.
pub fn predict_pose(
    h: &Transform3,
    alpha: f64,
    problem: &AlignmentProblem,
    ee_pose: &Transform3,
) -> Result<Transform3> {
    let h_inv = h.inverse();
    let ee_inv = ee_pose.inverse();
    let contributions = problem
        .ee_poses
        .iter()
        .zip(&problem.cam_obj_poses)
        .map(|(e, c)| {
            Ok(h_inv
                .compose(&ee_inv)
                .compose(e)
                .compose(h)
                .compose(&c.scaled_pose(alpha)?))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_transform(&contributions, &(alpha * dense_centroid(problem)))
}

/// Predicted camera-object pose for an arbitrary end-effector pose, using
/// the stationarity of the camera: `H⁻¹ E⁻¹ · ^C T_B`.
pub fn predict_object_pose(
    h: &Transform3,
    cam_base: &Transform3,
    ee_pose: &Transform3,
) -> Transform3 {
    h.inverse().compose(&ee_pose.inverse()).compose(cam_base)
}

/// On-disk problem description. Poses are bare 16-element row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(with = "row_major::list")]
    pub ee_poses: Vec<Transform3>,
    #[serde(with = "row_major::list")]
    pub cam_obj_poses: Vec<Transform3>,
    pub dense_ply: PathBuf,
    pub intrinsics: Intrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_subsample: Option<usize>,
}

/// Reads a problem file; `dense_ply` is resolved against the file's directory.
pub fn read_problem(path: &Path) -> Result<AlignmentProblem> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ProblemFile = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let dense = ply::read_ply(&dir.join(&file.dense_ply))?;
    let problem = AlignmentProblem {
        ee_poses: file.ee_poses,
        cam_obj_poses: file
            .cam_obj_poses
            .iter()
            .map(|t| CameraObjectPose {
                rotation: t.rotation,
                translation: t.translation,
            })
            .collect(),
        dense,
        intrinsics: file.intrinsics,
        render_subsample: file.render_subsample.unwrap_or(1),
    };
    problem.validate()?;
    Ok(problem)
}

/// Writes `problem` as `<dir>/<stem>.json` plus `<dir>/<stem>_dense.ply`.
pub fn write_problem(dir: &Path, stem: &str, problem: &AlignmentProblem) -> Result<PathBuf> {
    let ply_name = format!("{stem}_dense.ply");
    ply::write_ply(&dir.join(&ply_name), &problem.dense)?;
    let file = ProblemFile {
        ee_poses: problem.ee_poses.clone(),
        cam_obj_poses: problem
            .cam_obj_poses
            .iter()
            .map(CameraObjectPose::to_transform)
            .collect(),
        dense_ply: ply_name.into(),
        intrinsics: problem.intrinsics,
        render_subsample: Some(problem.render_subsample),
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// On-disk solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    #[serde(rename = "H", with = "row_major")]
    pub h: Transform3,
    pub alpha: f64,
    pub final_loss_px: f64,
    pub residuals_px: Vec<f64>,
    #[serde(with = "row_major")]
    pub cam_base: Transform3,
    pub cam_base_spread: f64,
    pub method: String,
    /// Problem the solution was computed from, relative to the solution file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<PathBuf>,
    /// Regressor parameters for the direct-regression method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regressor: Option<PathBuf>,
}

impl SolutionFile {
    pub fn from_solution(s: &AlignmentSolution, method: &str) -> Self {
        SolutionFile {
            h: s.h,
            alpha: s.alpha,
            final_loss_px: s.final_loss,
            residuals_px: s.per_pose_residuals.clone(),
            cam_base: s.cam_base.transform,
            cam_base_spread: s.cam_base.spread,
            method: method.to_string(),
            problem: None,
            regressor: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_ee_cases() {
        let poses = vec![
            Transform3::identity(),
            Transform3::from_translation(Vec3::new(0.0, 0.0, 0.1)),
            Transform3::new(Rotation3::rot_y(0.4), Vec3::new(0.2, -0.1, 0.3)),
        ];
        let a = relative_ee(0, 1, &poses).unwrap();
        assert!((a.translation - Vec3::new(0.0, 0.0, 0.1)).norm() < 1e-15);
        assert_eq!(a.rotation, Rotation3::identity());
        let self_rel = relative_ee(2, 2, &poses).unwrap();
        assert!((self_rel.to_matrix() - Mat4::identity()).abs().max() < 1e-15);
        let round = relative_ee(1, 2, &poses)
            .unwrap()
            .compose(&relative_ee(2, 1, &poses).unwrap());
        assert!((round.to_matrix() - Mat4::identity()).abs().max() < 1e-15);
        assert!(relative_ee(0, 3, &poses).is_err());
    }

    #[test]
    fn projection_cases() {
        let unit = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let px = project(
            &unit,
            &DenseCloud::new(vec![Vec3::new(0.0, 0.0, 1.0)]).unwrap(),
        )
        .unwrap();
        assert_eq!(px[0], Vec2::zeros());

        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let p = Vec3::new(2.0, 4.0, 2.0);
        let px = project(&k, &DenseCloud::new(vec![p, p * 3.7]).unwrap()).unwrap();
        assert_eq!(px[0], Vec2::new(820.0, 1240.0));
        assert!((px[1] - px[0]).norm() < 1e-12);

        let behind = DenseCloud::new(vec![p, Vec3::new(0.0, 0.0, -1.0)]).unwrap();
        match project(&k, &behind) {
            Err(Error::BehindCamera { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected behind-camera error, got {other:?}"),
        }
    }

    #[test]
    fn estimator_needs_two_poses() {
        let problem = AlignmentProblem {
            ee_poses: vec![Transform3::identity()],
            cam_obj_poses: vec![CameraObjectPose {
                rotation: Rotation3::identity(),
                translation: Vec3::new(0.0, 0.0, 1.0),
            }],
            dense: DenseCloud::new(vec![Vec3::zeros()]).unwrap(),
            intrinsics: Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap(),
            render_subsample: 1,
        };
        assert!(estimator(0, &Transform3::identity(), 1.0, &problem).is_err());
        assert!(solve(&problem, &AlignSolverOptions::default()).is_err());
    }

    #[test]
    fn start_rotations_are_valid_and_seeded() {
        let a = start_rotations(5, 3);
        assert_eq!(a.len(), 5);
        assert_eq!(a[0], Mat3::identity());
        for r in &a {
            assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, start_rotations(5, 3));
        assert_ne!(a[1], start_rotations(5, 4)[1]);
    }
}
