//! Held-out evaluation of fitted methods against test silhouettes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    predict_direct, regression_residuals, solve_no_render, train_direct, RegressorOptions,
    RegressorParams,
};
use crate::coord_align::{
    self, predict_pose, AlignSolverOptions, AlignmentProblem, AlignmentSolution, CameraBase,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pose, MetricReport};
use crate::raster::Mask;
use crate::se3::{DenseCloud, Intrinsics, Transform3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rendered,
    NoRender,
    Regress,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rendered, Method::NoRender, Method::Regress];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rendered => "rendered",
            Method::NoRender => "no-render",
            Method::Regress => "regress",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

/// Output of one method on one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub method: Method,
    pub solution: AlignmentSolution,
    pub regressor: Option<RegressorParams>,
}

/// Fits `method` on `problem`. For regression the structured fields of the
/// solution are placeholders (identity `H` and camera pose) and the
/// residuals come from the regressor.
pub fn fit(
    method: Method,
    problem: &AlignmentProblem,
    solver: &AlignSolverOptions,
    reg: &RegressorOptions,
) -> Result<Fit> {
    match method {
        Method::Rendered => Ok(Fit {
            method,
            solution: coord_align::solve(problem, solver)?,
            regressor: None,
        }),
        Method::NoRender => Ok(Fit {
            method,
            solution: solve_no_render(problem, solver)?,
            regressor: None,
        }),
        Method::Regress => {
            problem.validate()?;
            let (params, _) = train_direct(&problem.ee_poses, &problem.cam_obj_poses, reg)?;
            let mut full = problem.clone();
            full.render_subsample = 1;
            let residuals = regression_residuals(&params, &full)?;
            let final_loss = residuals.iter().sum::<f64>() / residuals.len() as f64;
            Ok(Fit {
                method,
                solution: AlignmentSolution {
                    h: Transform3::identity(),
                    alpha: coord_align::initial_alpha(problem),
                    final_loss,
                    per_pose_residuals: residuals,
                    cam_base: CameraBase {
                        transform: Transform3::identity(),
                        spread: 0.0,
                    },
                    start_losses: vec![],
                },
                regressor: Some(params),
            })
        }
    }
}

/// Predicts where the reconstruction appears at an unseen end-effector pose.
pub enum PosePredictor<'a> {
    /// Structured estimator; renders the reconstruction scaled to meters.
    Structured {
        h: Transform3,
        alpha: f64,
        train: &'a AlignmentProblem,
    },
    /// Regressor; renders the reconstruction in gauge units.
    Regression {
        params: &'a RegressorParams,
        train: &'a AlignmentProblem,
    },
}

impl<'a> PosePredictor<'a> {
    pub fn from_fit(fit: &'a Fit, train: &'a AlignmentProblem) -> Self {
        match &fit.regressor {
            Some(params) => PosePredictor::Regression { params, train },
            None => PosePredictor::Structured {
                h: fit.solution.h,
                alpha: fit.solution.alpha,
                train,
            },
        }
    }

    /// Cloud to render and its camera-frame placement.
    pub fn predict(&self, ee_pose: &Transform3) -> Result<(DenseCloud, Transform3)> {
        match self {
            PosePredictor::Structured { h, alpha, train } => Ok((
                train.dense.scaled(*alpha),
                predict_pose(h, *alpha, train, ee_pose)?,
            )),
            PosePredictor::Regression { params, train } => {
                Ok((train.dense.clone(), predict_direct(params, ee_pose)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestReport {
    pub per_pose: Vec<MetricReport>,
    pub mean_d_hat: f64,
}

/// Symmetrized distance between the predicted projection and the silhouette
/// for every test pose.
pub fn evaluate_test_set(
    predictor: &PosePredictor,
    test_ee: &[Transform3],
    masks: &[Mask],
    k: &Intrinsics,
    subsample: usize,
) -> Result<TestReport> {
    if test_ee.is_empty() || test_ee.len() != masks.len() {
        return Err(Error::SizeMismatch(format!(
            "{} test poses and {} masks",
            test_ee.len(),
            masks.len()
        )));
    }
    let per_pose = test_ee
        .iter()
        .zip(masks)
        .map(|(e, mask)| {
            let (cloud, pose) = predictor.predict(e)?;
            evaluate_pose(&cloud, &pose, k, mask, subsample)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_d_hat = per_pose.iter().map(|r| r.d_hat).sum::<f64>() / per_pose.len() as f64;
    Ok(TestReport {
        per_pose,
        mean_d_hat,
    })
}
