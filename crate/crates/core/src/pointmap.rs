//! Global alignment of pairwise pointmaps into one dense reconstruction.
//!
//! Each pair `e = (n, m)` carries two pointmaps expressed in the frame of
//! image `n`: `X^{n,n}` (pixels of image `n`) and `X^{n,m}` (pixels of image
//! `m`). The solver recovers one global pointmap per image together with a
//! pose `P_e` and scale `σ_e` per pair by minimizing
//!
//! ```text
//! Σ_e Σ_{i ∈ e} Σ_{(w,h)} C^{e,i}_{w,h} ‖X̄_i(w,h) − σ_e P_e X^{e,i}_{w,h}‖₂
//! ```
//!
//! The pose and scale are shared by both members of a pair since both
//! pointmaps live in the same frame.

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{cosine_factor, Adam};
use crate::raster::Mask;
use crate::se3::{procrustes_project, DenseCloud, Mat3, Rotation3, Transform3, Vec3};

/// Per-pixel 3D coordinates, row-major with `h` outer and `w` inner.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<Vec3>,
}

impl Pointmap {
    pub fn new(width: usize, height: usize, coords: Vec<Vec3>) -> Result<Self> {
        if coords.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "pointmap {width}x{height} has {} coordinates",
                coords.len()
            )));
        }
        if coords.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(
                "pointmap has non-finite entries".into(),
            ));
        }
        Ok(Pointmap {
            width,
            height,
            coords,
        })
    }

    pub fn at(&self, w: usize, h: usize) -> &Vec3 {
        &self.coords[h * self.width + w]
    }
}

/// Per-pixel nonnegative confidence; masked-out pixels are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "confidence map {width}x{height} has {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "confidences must be finite and nonnegative".into(),
            ));
        }
        Ok(ConfidenceMap {
            width,
            height,
            values,
        })
    }

    pub fn at(&self, w: usize, h: usize) -> f64 {
        self.values[h * self.width + w]
    }
}

/// Model output for one ordered image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub n: usize,
    pub m: usize,
    pub x_nn: Pointmap,
    pub x_nm: Pointmap,
    pub c_nn: ConfidenceMap,
    pub c_nm: ConfidenceMap,
}

impl PairPrediction {
    pub fn validate(&self) -> Result<()> {
        if self.n == self.m {
            return Err(Error::InvalidInput(format!(
                "pair ({}, {}) repeats an image",
                self.n, self.m
            )));
        }
        let (w, h) = (self.x_nn.width, self.x_nn.height);
        let dims = [
            (self.x_nm.width, self.x_nm.height),
            (self.c_nn.width, self.c_nn.height),
            (self.c_nm.width, self.c_nm.height),
        ];
        if dims.iter().any(|d| *d != (w, h)) {
            return Err(Error::SizeMismatch(format!(
                "rasters of pair ({}, {}) differ in size",
                self.n, self.m
            )));
        }
        if self.x_nn.coords.len() != w * h
            || self.x_nm.coords.len() != w * h
            || self.c_nn.values.len() != w * h
            || self.c_nm.values.len() != w * h
        {
            return Err(Error::SizeMismatch("raster buffer length".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x_nn.width
    }

    pub fn height(&self) -> usize {
        self.x_nn.height
    }

    /// The two members as `(image index, pointmap, confidence)`.
    pub fn members(&self) -> [(usize, &Pointmap, &ConfidenceMap); 2] {
        [
            (self.n, &self.x_nn, &self.c_nn),
            (self.m, &self.x_nm, &self.c_nm),
        ]
    }
}

/// Zeroes the confidence of every pixel outside the masks.
pub fn mask_confidences(
    pred: &PairPrediction,
    mask_n: &Mask,
    mask_m: &Mask,
) -> Result<PairPrediction> {
    pred.validate()?;
    for mask in [mask_n, mask_m] {
        if (mask.width, mask.height) != (pred.width(), pred.height()) {
            return Err(Error::SizeMismatch(format!(
                "mask {}x{} vs pointmap {}x{}",
                mask.width,
                mask.height,
                pred.width(),
                pred.height()
            )));
        }
    }
    let apply = |c: &ConfidenceMap, mask: &Mask| ConfidenceMap {
        width: c.width,
        height: c.height,
        values: c
            .values
            .iter()
            .zip(&mask.data)
            .map(|(v, keep)| if *keep { *v } else { 0.0 })
            .collect(),
    };
    Ok(PairPrediction {
        c_nn: apply(&pred.c_nn, mask_n),
        c_nm: apply(&pred.c_nm, mask_m),
        ..pred.clone()
    })
}

/// Pose and scale of one pair. The rotation block is kept unconstrained
/// between optimizer steps and re-projected onto SO(3) after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub log_scale: f64,
}

impl PairPose {
    pub fn identity() -> Self {
        PairPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            log_scale: 0.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// `σ (R x + t)`.
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale() * (self.rotation * x + self.translation)
    }
}

/// Optimization variables of the global alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAlignmentVariables {
    /// One global pointmap per image.
    pub global_maps: Vec<Pointmap>,
    /// One pose/scale per pair, in the order of the predictions.
    pub pair_poses: Vec<PairPose>,
}

/// Gradient of [`alignment_loss`] with the same layout as the variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAlignmentGradient {
    pub global_maps: Vec<Vec<Vec3>>,
    pub rotation: Vec<Mat3>,
    pub translation: Vec<Vec3>,
    pub log_scale: Vec<f64>,
}

fn check_indices(vars: &GlobalAlignmentVariables, preds: &[PairPrediction]) -> Result<()> {
    if vars.pair_poses.len() != preds.len() {
        return Err(Error::SizeMismatch(format!(
            "{} pair poses for {} pairs",
            vars.pair_poses.len(),
            preds.len()
        )));
    }
    for p in preds {
        for (i, map, _) in p.members() {
            let g = vars.global_maps.get(i).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "pair references image {i} beyond {}",
                    vars.global_maps.len()
                ))
            })?;
            if g.coords.len() != map.coords.len() {
                return Err(Error::SizeMismatch(format!("global map {i} raster size")));
            }
        }
    }
    Ok(())
}

/// Confidence-weighted sum of unsquared residual norms.
pub fn alignment_loss(vars: &GlobalAlignmentVariables, preds: &[PairPrediction]) -> Result<f64> {
    check_indices(vars, preds)?;
    let mut total = 0.0;
    for (pose, pred) in vars.pair_poses.iter().zip(preds) {
        for (i, map, conf) in pred.members() {
            let global = &vars.global_maps[i].coords;
            for ((x, c), g) in map.coords.iter().zip(&conf.values).zip(global) {
                if *c > 0.0 {
                    total += c * (g - pose.apply(x)).norm();
                }
            }
        }
    }
    Ok(total)
}

/// Loss and analytic gradient. At a zero residual the subgradient 0 is used.
pub fn alignment_loss_grad(
    vars: &GlobalAlignmentVariables,
    preds: &[PairPrediction],
) -> Result<(f64, GlobalAlignmentGradient)> {
    check_indices(vars, preds)?;
    let mut grad = GlobalAlignmentGradient {
        global_maps: vars
            .global_maps
            .iter()
            .map(|g| vec![Vec3::zeros(); g.coords.len()])
            .collect(),
        rotation: vec![Mat3::zeros(); preds.len()],
        translation: vec![Vec3::zeros(); preds.len()],
        log_scale: vec![0.0; preds.len()],
    };
    let mut total = 0.0;
    for (e, (pose, pred)) in vars.pair_poses.iter().zip(preds).enumerate() {
        let sigma = pose.scale();
        for (i, map, conf) in pred.members() {
            let global = &vars.global_maps[i].coords;
            for (k, (x, c)) in map.coords.iter().zip(&conf.values).enumerate() {
                if *c <= 0.0 {
                    continue;
                }
                let y = pose.rotation * x + pose.translation;
                let r = global[k] - sigma * y;
                let d = r.norm();
                total += c * d;
                if d == 0.0 {
                    continue;
                }
                let u = r * (c / d);
                grad.global_maps[i][k] += u;
                grad.rotation[e] -= sigma * u * x.transpose();
                grad.translation[e] -= sigma * u;
                grad.log_scale[e] -= sigma * u.dot(&y);
            }
        }
    }
    Ok((total, grad))
}

/// Knobs of the global alignment solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalAlignOptions {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Final step size as a fraction of the initial one.
    pub lr_floor: f64,
    /// Pixels whose confidence exceeds this enter the dense cloud.
    pub conf_threshold: f64,
}

impl Default for GlobalAlignOptions {
    fn default() -> Self {
        GlobalAlignOptions {
            learning_rate: 1e-2,
            max_iters: 500,
            lr_floor: 0.0,
            conf_threshold: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAlignmentResult {
    pub dense: DenseCloud,
    /// Camera-to-world pose of each image, in gauge units.
    pub camera_poses: Vec<Transform3>,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Similarity `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale * (self.rotation * x) + self.translation
    }

    fn compose(&self, other: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    fn to_pair_pose(self) -> PairPose {
        PairPose {
            rotation: self.rotation,
            translation: self.translation / self.scale,
            log_scale: self.scale.ln(),
        }
    }
}

/// Weighted similarity fit `target ≈ s R source + t` (Umeyama).
pub(crate) fn fit_similarity(
    source: &[Vec3],
    target: &[Vec3],
    weights: &[f64],
) -> Option<Similarity> {
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return None;
    }
    let mu_s = source
        .iter()
        .zip(weights)
        .map(|(p, w)| p * *w)
        .sum::<Vec3>()
        / wsum;
    let mu_t = target
        .iter()
        .zip(weights)
        .map(|(p, w)| p * *w)
        .sum::<Vec3>()
        / wsum;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for ((s, t), w) in source.iter().zip(target).zip(weights) {
        let ds = s - mu_s;
        cov += *w * (t - mu_t) * ds.transpose();
        var_s += *w * ds.norm_squared();
    }
    if !(var_s > 0.0) {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let sv = svd.singular_values;
    let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b]))?;
    let mut d = Vec3::repeat(1.0);
    if (u * v_t).determinant() < 0.0 {
        d[smallest] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&d) * v_t;
    let scale = sv.dot(&d) / var_s;
    if !(scale > 0.0) {
        return None;
    }
    Some(Similarity {
        scale,
        rotation,
        translation: mu_t - scale * (rotation * mu_s),
    })
}

/// Weighted least-squares ratio `k` with `reference ≈ k · x`.
fn scale_ratio(x: &[Vec3], reference: &[Vec3], weights: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, b), w) in x.iter().zip(reference).zip(weights) {
        num += w * a.dot(b);
        den += w * a.norm_squared();
    }
    let k = num / den;
    (den > 0.0 && k > 0.0 && k.is_finite()).then_some(k)
}

fn joint_weights(a: &ConfidenceMap, b: &ConfidenceMap) -> Vec<f64> {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x.min(*y))
        .collect()
}

struct PairGraph {
    n_images: usize,
    /// First pair (in input order) whose first member is each image.
    reference: Vec<usize>,
}

fn build_graph(preds: &[PairPrediction]) -> Result<PairGraph> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no image pairs".into()));
    }
    let (w, h) = (preds[0].width(), preds[0].height());
    for p in preds {
        p.validate()?;
        if (p.width(), p.height()) != (w, h) {
            return Err(Error::SizeMismatch(
                "all pairs must share one raster size".into(),
            ));
        }
    }
    let n_images = preds.iter().map(|p| p.n.max(p.m)).max().expect("nonempty") + 1;
    if n_images < 2 {
        return Err(Error::InvalidInput("need at least two images".into()));
    }
    let used: BTreeSet<usize> = preds.iter().flat_map(|p| [p.n, p.m]).collect();
    if let Some(missing) = (0..n_images).find(|i| !used.contains(i)) {
        return Err(Error::DisconnectedGraph(format!(
            "image {missing} appears in no pair"
        )));
    }

    // Connectivity by union-find.
    let mut parent: Vec<usize> = (0..n_images).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = i;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    for p in preds {
        let (a, b) = (find(&mut parent, p.n), find(&mut parent, p.m));
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    if let Some(other) = (0..n_images).find(|&i| find(&mut parent, i) != root) {
        return Err(Error::DisconnectedGraph(format!(
            "image {other} is not connected to image 0"
        )));
    }

    let mut reference = vec![usize::MAX; n_images];
    for (e, p) in preds.iter().enumerate() {
        if reference[p.n] == usize::MAX {
            reference[p.n] = e;
        }
    }
    if let Some(i) = reference.iter().position(|r| *r == usize::MAX) {
        return Err(Error::InvalidInput(format!(
            "image {i} is never the first member of a pair, so its camera pose is unobservable"
        )));
    }
    Ok(PairGraph {
        n_images,
        reference,
    })
}

/// Initial pair poses and global maps from a breadth-first chain of
/// similarity fits, anchored so that pair 0 has identity pose and unit scale.
fn initialize(preds: &[PairPrediction], graph: &PairGraph) -> Result<GlobalAlignmentVariables> {
    let n = graph.n_images;
    // World-from-reference-frame similarity for each image: the frame of its
    // reference pair.
    let mut frame: Vec<Option<Similarity>> = vec![None; n];
    let start = preds[0].n;
    frame[start] = Some(Similarity::identity());
    let mut queue = VecDeque::from([start]);

    // World map of pair `e`, given the frame of its first member.
    let pair_frame = |e: usize, frames: &[Option<Similarity>]| -> Result<Similarity> {
        let p = &preds[e];
        let base = frames[p.n].expect("first member placed");
        let r = &preds[graph.reference[p.n]];
        let k = if graph.reference[p.n] == e {
            1.0
        } else {
            scale_ratio(
                &p.x_nn.coords,
                &r.x_nn.coords,
                &joint_weights(&p.c_nn, &r.c_nn),
            )
            .ok_or(Error::NoSupervisingPixels)?
        };
        Ok(base.compose(&Similarity {
            scale: k,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }))
    };

    while let Some(a) = queue.pop_front() {
        for (e, p) in preds.iter().enumerate() {
            let b = if p.n == a {
                p.m
            } else if p.m == a {
                p.n
            } else {
                continue;
            };
            if frame[b].is_some() {
                continue;
            }
            let placed = if p.n == a {
                // Image b seen from a's frame versus b's own reference frame.
                let s_e = pair_frame(e, &frame)?;
                let r = &preds[graph.reference[b]];
                let w = joint_weights(&r.c_nn, &p.c_nm);
                fit_similarity(&r.x_nn.coords, &p.x_nm.coords, &w).map(|q| s_e.compose(&q))
            } else {
                // Image a (already placed) seen from b's frame.
                let ra = &preds[graph.reference[a]];
                let fa = frame[a].expect("placed");
                let world_a: Vec<Vec3> = ra.x_nn.coords.iter().map(|x| fa.apply(x)).collect();
                let w = joint_weights(&ra.c_nn, &p.c_nm);
                fit_similarity(&p.x_nm.coords, &world_a, &w).and_then(|s_e| {
                    let r = &preds[graph.reference[b]];
                    if graph.reference[b] == e {
                        return Some(s_e);
                    }
                    let k = scale_ratio(
                        &r.x_nn.coords,
                        &p.x_nn.coords,
                        &joint_weights(&r.c_nn, &p.c_nn),
                    )?;
                    Some(s_e.compose(&Similarity {
                        scale: k,
                        rotation: Mat3::identity(),
                        translation: Vec3::zeros(),
                    }))
                })
            };
            let s = placed.ok_or(Error::NoSupervisingPixels)?;
            frame[b] = Some(s);
            queue.push_back(b);
        }
    }

    let pair_poses = (0..preds.len())
        .map(|e| pair_frame(e, &frame).map(Similarity::to_pair_pose))
        .collect::<Result<Vec<_>>>()?;
    let global_maps = (0..n)
        .map(|i| {
            let r = &preds[graph.reference[i]];
            let f = frame[i].expect("connected graph places every image");
            Pointmap {
                width: r.width(),
                height: r.height(),
                coords: r.x_nn.coords.iter().map(|x| f.apply(x)).collect(),
            }
        })
        .collect();
    Ok(GlobalAlignmentVariables {
        global_maps,
        pair_poses,
    })
}

fn pack(vars: &GlobalAlignmentVariables) -> Vec<f64> {
    let mut out = Vec::new();
    for g in &vars.global_maps {
        for p in &g.coords {
            out.extend(p.iter());
        }
    }
    // Pair 0 is the gauge anchor and stays fixed.
    for pose in vars.pair_poses.iter().skip(1) {
        out.extend(pose.rotation.transpose().iter());
        out.extend(pose.translation.iter());
        out.push(pose.log_scale);
    }
    out
}

fn unpack(flat: &[f64], vars: &mut GlobalAlignmentVariables) {
    let mut it = flat.iter().copied();
    for g in &mut vars.global_maps {
        for p in &mut g.coords {
            for v in p.iter_mut() {
                *v = it.next().expect("flat length");
            }
        }
    }
    for pose in vars.pair_poses.iter_mut().skip(1) {
        let mut r = [0.0; 9];
        for v in &mut r {
            *v = it.next().expect("flat length");
        }
        pose.rotation = Mat3::from_row_slice(&r);
        for v in pose.translation.iter_mut() {
            *v = it.next().expect("flat length");
        }
        pose.log_scale = it.next().expect("flat length");
    }
}

fn pack_grad(grad: &GlobalAlignmentGradient) -> Vec<f64> {
    let mut out = Vec::new();
    for g in &grad.global_maps {
        for p in g {
            out.extend(p.iter());
        }
    }
    for e in 1..grad.rotation.len() {
        out.extend(grad.rotation[e].transpose().iter());
        out.extend(grad.translation[e].iter());
        out.push(grad.log_scale[e]);
    }
    out
}

fn project_rotations(vars: &mut GlobalAlignmentVariables) -> Result<()> {
    for pose in vars.pair_poses.iter_mut().skip(1) {
        pose.rotation = *procrustes_project(&pose.rotation)?.matrix();
    }
    Ok(())
}

/// Solves the global alignment and extracts the dense cloud and camera poses.
pub fn global_align(
    preds: &[PairPrediction],
    opts: &GlobalAlignOptions,
) -> Result<GlobalAlignmentResult> {
    let total_conf: f64 = preds
        .iter()
        .flat_map(|p| p.c_nn.values.iter().chain(&p.c_nm.values))
        .sum();
    if !(total_conf > 0.0) {
        return Err(Error::NoSupervisingPixels);
    }
    let graph = build_graph(preds)?;

    let mut vars = initialize(preds, &graph)?;
    let (initial_loss, mut grad) = alignment_loss_grad(&vars, preds)?;
    let mut loss = initial_loss;
    info!(
        "global alignment: {} images, {} pairs, initial loss {initial_loss:.6e}",
        graph.n_images,
        preds.len()
    );

    let mut flat = pack(&vars);
    let lrs = vec![opts.learning_rate; flat.len()];
    let mut adam = Adam::new(flat.len());
    let mut backoff = 1.0;
    let mut history = Vec::with_capacity(opts.max_iters);
    for iter in 0..opts.max_iters {
        let g = pack_grad(&grad);
        let step = adam.step(
            &g,
            &lrs,
            backoff * cosine_factor(iter, opts.max_iters, opts.lr_floor),
        );
        let candidate_flat: Vec<f64> = flat.iter().zip(&step).map(|(a, b)| a + b).collect();
        let mut candidate = vars.clone();
        unpack(&candidate_flat, &mut candidate);
        project_rotations(&mut candidate)?;
        let (new_loss, new_grad) = alignment_loss_grad(&candidate, preds)?;
        if new_loss <= loss {
            loss = new_loss;
            grad = new_grad;
            flat = pack(&candidate);
            vars = candidate;
        } else {
            backoff *= 0.5;
        }
        history.push(loss);
        if iter % 100 == 0 {
            debug!("iter {iter}: loss {loss:.6e}, backoff {backoff:e}");
        }
    }
    let window = 50.min(history.len());
    let converged = opts.max_iters > 0 && {
        let tail = &history[history.len() - window..];
        (tail[0] - tail[tail.len() - 1]).abs() <= 1e-6 * (1.0 + loss)
    };
    info!("global alignment: final loss {loss:.6e}, converged {converged}");

    let camera_poses = (0..graph.n_images)
        .map(|i| {
            let pose = &vars.pair_poses[graph.reference[i]];
            let r =
                Rotation3::new(pose.rotation).or_else(|_| procrustes_project(&pose.rotation))?;
            Ok(Transform3::new(r, pose.scale() * pose.translation))
        })
        .collect::<Result<Vec<_>>>()?;

    let dense = extract_dense(&vars, preds, graph.n_images, opts.conf_threshold)?;
    Ok(GlobalAlignmentResult {
        dense,
        camera_poses,
        final_loss: loss,
        initial_loss,
        iterations: opts.max_iters,
        converged,
    })
}

/// Per-image confidence is the maximum over every pair member showing that
/// image; pixels above `threshold` are concatenated in image order.
fn extract_dense(
    vars: &GlobalAlignmentVariables,
    preds: &[PairPrediction],
    n_images: usize,
    threshold: f64,
) -> Result<DenseCloud> {
    let size = vars.global_maps[0].coords.len();
    let mut conf = vec![vec![0.0f64; size]; n_images];
    for p in preds {
        for (i, _, c) in p.members() {
            for (acc, v) in conf[i].iter_mut().zip(&c.values) {
                *acc = acc.max(*v);
            }
        }
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, g) in vars.global_maps.iter().enumerate() {
        for (p, c) in g.coords.iter().zip(&conf[i]) {
            if *c > threshold {
                points.push(*p);
                weights.push(*c);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::NoSupervisingPixels);
    }
    DenseCloud::with_confidence(points, weights)
}

const PMAP_MAGIC: &[u8; 4] = b"PMAP";
const PMAP_VERSION: u32 = 1;

/// Serializes one pair member: header, `W·H·3` float32 coordinates, then
/// `W·H` float32 confidences, all little-endian.
pub fn write_pmap(
    writer: &mut impl Write,
    map: &Pointmap,
    conf: &ConfidenceMap,
) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + 16 * map.coords.len());
    buf.extend_from_slice(PMAP_MAGIC);
    buf.extend_from_slice(&PMAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    for p in &map.coords {
        for v in p.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for c in &conf.values {
        buf.extend_from_slice(&(*c as f32).to_le_bytes());
    }
    writer.write_all(&buf)
}

pub fn read_pmap(reader: &mut impl Read) -> Result<(Pointmap, ConfidenceMap)> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::format("PMAP", e.to_string()))?;
    if bytes.len() < 16 || &bytes[..4] != PMAP_MAGIC {
        return Err(Error::format("PMAP", "missing magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != PMAP_VERSION {
        return Err(Error::format(
            "PMAP",
            format!("unsupported version {version}"),
        ));
    }
    let (w, h) = (word(8) as usize, word(12) as usize);
    let need = 16 + 16 * w * h;
    if bytes.len() != need {
        return Err(Error::format(
            "PMAP",
            format!(
                "{w}x{h} raster needs {need} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let float = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as f64;
    let coords = (0..w * h)
        .map(|k| {
            let o = 16 + 12 * k;
            Vec3::new(float(o), float(o + 4), float(o + 8))
        })
        .collect();
    let base = 16 + 12 * w * h;
    let values = (0..w * h).map(|k| float(base + 4 * k)).collect();
    Ok((
        Pointmap::new(w, h, coords)?,
        ConfidenceMap::new(w, h, values)?,
    ))
}

/// One manifest entry; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub n: usize,
    pub m: usize,
    pub x_nn: PathBuf,
    pub x_nm: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_n: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_m: Option<PathBuf>,
}

fn read_pmap_file(path: &Path) -> Result<(Pointmap, ConfidenceMap)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pmap(&mut f)
}

/// Loads every pair listed in a manifest, applying masks where given.
pub fn load_manifest(path: &Path) -> Result<Vec<PairPrediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|entry| {
            let (x_nn, c_nn) = read_pmap_file(&dir.join(&entry.x_nn))?;
            let (x_nm, c_nm) = read_pmap_file(&dir.join(&entry.x_nm))?;
            let pred = PairPrediction {
                n: entry.n,
                m: entry.m,
                x_nn,
                x_nm,
                c_nn,
                c_nm,
            };
            pred.validate()?;
            match (&entry.mask_n, &entry.mask_m) {
                (None, None) => Ok(pred),
                (mn, mm) => {
                    let load = |p: &Option<PathBuf>| match p {
                        Some(p) => Mask::read_pgm(&dir.join(p)),
                        None => Ok(Mask::filled(pred.width(), pred.height(), true)),
                    };
                    mask_confidences(&pred, &load(mn)?, &load(mm)?)
                }
            }
        })
        .collect()
}

/// Writes one PMAP file per pair member plus `manifest.json` into `dir`.
pub fn write_manifest(dir: &Path, preds: &[PairPrediction]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(preds.len());
    for (e, p) in preds.iter().enumerate() {
        let names = [
            format!("pair{e:03}_{}_{}_nn.pmap", p.n, p.m),
            format!("pair{e:03}_{}_{}_nm.pmap", p.n, p.m),
        ];
        for (name, (map, conf)) in names.iter().zip([(&p.x_nn, &p.c_nn), (&p.x_nm, &p.c_nm)]) {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_pmap(&mut f, map, conf).map_err(|e| Error::io(&path, e))?;
        }
        entries.push(ManifestEntry {
            n: p.n,
            m: p.m,
            x_nn: names[0].clone().into(),
            x_nm: names[1].clone().into(),
            mask_n: None,
            mask_m: None,
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pred(conf: f64) -> PairPrediction {
        let coords: Vec<Vec3> = (0..4).map(|k| Vec3::new(k as f64, 1.0, 2.0)).collect();
        PairPrediction {
            n: 0,
            m: 1,
            x_nn: Pointmap::new(2, 2, coords.clone()).unwrap(),
            x_nm: Pointmap::new(2, 2, coords).unwrap(),
            c_nn: ConfidenceMap::new(2, 2, vec![conf; 4]).unwrap(),
            c_nm: ConfidenceMap::new(2, 2, vec![conf; 4]).unwrap(),
        }
    }

    #[test]
    fn masking_cases() {
        let pred = tiny_pred(2.0);
        let ones = Mask::filled(2, 2, true);
        assert_eq!(mask_confidences(&pred, &ones, &ones).unwrap(), pred);

        let zeros = Mask::filled(2, 2, false);
        let masked = mask_confidences(&pred, &zeros, &zeros).unwrap();
        assert!(masked
            .c_nn
            .values
            .iter()
            .chain(&masked.c_nm.values)
            .all(|v| *v == 0.0));

        let mut one_out = Mask::filled(2, 2, true);
        one_out.set(1, 0, false);
        let masked = mask_confidences(&pred, &one_out, &ones).unwrap();
        let expected: Vec<f64> = pred
            .c_nn
            .values
            .iter()
            .zip(&one_out.data)
            .map(|(c, m)| c * f64::from(u8::from(*m)))
            .collect();
        assert_eq!(masked.c_nn.values, expected);
        assert_eq!(masked.c_nn.values.iter().filter(|v| **v == 0.0).count(), 1);
        assert_eq!(masked.c_nm, pred.c_nm);

        assert!(mask_confidences(&pred, &Mask::filled(3, 2, true), &ones).is_err());
    }

    #[test]
    fn loss_single_active_pixel() {
        let mut pred = tiny_pred(0.0);
        pred.c_nn.values[2] = 1.75;
        let mut global = vec![pred.x_nn.clone(), pred.x_nm.clone()];
        global[0].coords[2] += Vec3::new(0.3, 0.0, 0.4);
        let vars = GlobalAlignmentVariables {
            global_maps: global,
            pair_poses: vec![PairPose::identity()],
        };
        let loss = alignment_loss(&vars, &[pred]).unwrap();
        assert!((loss - 1.75 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_zero_confidence_is_zero() {
        let pred = tiny_pred(0.0);
        let vars = GlobalAlignmentVariables {
            global_maps: vec![pred.x_nm.clone(), pred.x_nn.clone()],
            pair_poses: vec![PairPose {
                rotation: Mat3::identity(),
                translation: Vec3::new(5.0, 0.0, 0.0),
                log_scale: 0.3,
            }],
        };
        assert_eq!(alignment_loss(&vars, &[pred]).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_confidence_is_rejected() {
        let pred = tiny_pred(0.0);
        assert!(matches!(
            global_align(&[pred], &GlobalAlignOptions::default()),
            Err(Error::NoSupervisingPixels)
        ));
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let a = tiny_pred(2.0);
        let mut b = tiny_pred(2.0);
        b.n = 2;
        b.m = 3;
        let err = global_align(&[a, b], &GlobalAlignOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DisconnectedGraph(_)), "{err}");
    }

    #[test]
    fn pmap_round_trip_and_header() {
        let pred = tiny_pred(1.25);
        let mut buf = Vec::new();
        write_pmap(&mut buf, &pred.x_nn, &pred.c_nn).unwrap();
        assert_eq!(&buf[..4], b"PMAP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 16 * 4);
        let (map, conf) = read_pmap(&mut buf.as_slice()).unwrap();
        assert_eq!(map, pred.x_nn);
        assert_eq!(conf, pred.c_nn);
        buf.pop();
        assert!(read_pmap(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn similarity_fit_recovers_transform() {
        let truth = Similarity {
            scale: 1.7,
            rotation: *Rotation3::from_axis_angle(&Vec3::new(1.0, -0.3, 0.2), 0.8).matrix(),
            translation: Vec3::new(0.2, -1.0, 3.0),
        };
        let src: Vec<Vec3> = (0..12)
            .map(|k| {
                let f = k as f64;
                Vec3::new(f.sin(), (1.3 * f).cos(), 0.1 * f)
            })
            .collect();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let fit = fit_similarity(&src, &dst, &vec![1.0; src.len()]).unwrap();
        assert!((fit.scale - truth.scale).abs() < 1e-12);
        assert!((fit.rotation - truth.rotation).abs().max() < 1e-12);
        assert!((fit.translation - truth.translation).norm() < 1e-12);
    }
}
