//! Subcommands of the `graspalign` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use graspalign::baselines::{RegressorOptions, RegressorParams};
use graspalign::coord_align::{self, AlignSolverOptions, AlignmentProblem, SolutionFile};
use graspalign::evaluation::{evaluate_test_set, fit, Method, PosePredictor};
use graspalign::kinematics::{self, ChainSpec, IkOptions};
use graspalign::metrics::render_overlay;
use graspalign::ope::CameraObjectPose;
use graspalign::pointmap::{global_align, load_manifest, GlobalAlignOptions};
use graspalign::se3::{row_major, Intrinsics, Transform3, Vec3};
use graspalign::synth::{self, ScenarioSpec};
use graspalign::{ply, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_GRAPH: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_IK: i32 = 5;

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::DisconnectedGraph(_) => EXIT_GRAPH,
            Error::Divergence(_) => EXIT_DIVERGENCE,
            Error::IkNotConverged { .. } => EXIT_IK,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn input_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "graspalign",
    version,
    about = "Object pose and scale recovery for a grasped object seen by a fixed camera"
)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with default options; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario and write it to a directory.
    Simulate(SimulateArgs),
    /// Fuse pairwise pointmaps into one reconstruction with camera poses.
    Align(AlignArgs),
    /// Recover the end-effector-to-object transform and metric scale.
    Solve(SolveArgs),
    /// Score a solution against held-out silhouettes.
    Evaluate(EvaluateArgs),
    /// Compute a configuration that tilts the held object about a pivot.
    Pour(PourArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub spec: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    pub manifest: PathBuf,
    /// Output directory for dense.ply and poses.json.
    pub out_dir: PathBuf,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    /// Fail with exit code 4 when the final loss exceeds this.
    #[arg(long)]
    pub loss_threshold: Option<f64>,
    /// End-effector poses (JSON list of row-major 4x4 arrays); with
    /// --intrinsics, also writes problem.json.
    #[arg(long, requires = "intrinsics")]
    pub ee_poses: Option<PathBuf>,
    /// Intrinsics JSON {"fx","fy","cx","cy"}.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub problem: PathBuf,
    pub out: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub render_subsample: Option<usize>,
    /// Ground-truth JSON of a synthetic scenario; errors are printed.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub solution: PathBuf,
    pub testset_dir: PathBuf,
    pub report: PathBuf,
    /// Directory for overlay images; defaults to the report's directory.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
    /// Project every k-th point only.
    #[arg(long)]
    pub subsample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PourArgs {
    pub solution: PathBuf,
    pub chain: PathBuf,
    /// Pivot in base coordinates, "x,y,z".
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, conflicts_with = "pivot_object")]
    pub pivot: Option<Vec3>,
    /// Pivot in object coordinates, "x,y,z".
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub pivot_object: Option<Vec3>,
    /// Rotation axis in base coordinates, "x,y,z".
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub axis: Option<Vec3>,
    #[arg(long, allow_hyphen_values = true)]
    pub angle_deg: Option<f64>,
    /// Current configuration, comma separated.
    #[arg(long, value_parser = parse_joints, allow_hyphen_values = true)]
    pub q0: Option<JointValues>,
    /// Write the goal configuration as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

/// Joint values given as one comma-separated argument.
#[derive(Debug, Clone, PartialEq)]
pub struct JointValues(pub Vec<f64>);

fn parse_joints(s: &str) -> Result<JointValues, String> {
    parse_list(s).map(JointValues)
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v = parse_list(s)?;
    if v.len() != 3 {
        return Err(format!(
            "expected 3 comma-separated values, got {}",
            v.len()
        ));
    }
    Ok(Vec3::new(v[0], v[1], v[2]))
}

/// Options read from `--config`. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub align: Option<GlobalAlignOptions>,
    pub solve: Option<SolveConfig>,
    pub regressor: Option<RegressorOptions>,
    pub evaluate: Option<EvaluateConfig>,
    pub pour: Option<PourConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub method: Option<Method>,
    pub solver: Option<AlignSolverOptions>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub subsample: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PourConfig {
    pub axis: Option<[f64; 3]>,
    pub angle_deg: Option<f64>,
    pub ik: Option<IkOptions>,
}

impl RunConfig {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))
    }
}

/// Global settings after merging flags over the config file.
#[derive(Debug, Clone)]
pub struct Context {
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
}

impl Context {
    pub fn new(cli: &Cli) -> CliResult<Self> {
        let config = match &cli.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        Ok(Context {
            seed: cli.seed.or(config.seed).unwrap_or(0),
            threads: cli.threads.or(config.threads).unwrap_or(1).max(1),
            config,
        })
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

pub fn run(cli: &Cli) -> CliResult {
    let ctx = Context::new(cli)?;
    // The global pool can only be configured once per process.
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.threads)
        .build_global()
    {
        info!("thread pool already configured: {e}");
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&ctx, a, cli.seed),
        Command::Align(a) => cmd_align(&ctx, a),
        Command::Solve(a) => cmd_solve(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Pour(a) => cmd_pour(&ctx, a),
    }
}

pub fn cmd_simulate(ctx: &Context, args: &SimulateArgs, seed_flag: Option<u64>) -> CliResult {
    let mut spec: ScenarioSpec = read_json(&args.spec)?;
    if let Some(s) = seed_flag.or(ctx.config.seed) {
        spec.seed = s;
    }
    let scenario = synth::Scenario::build(&spec)?;
    let generated = synth::generate(&scenario)?;
    synth::export(&scenario, &generated, &args.out_dir)?;
    println!(
        "scenario written to {}: {} training poses, {} test poses, {} pairs, alpha {}",
        args.out_dir.display(),
        scenario.train_configs.len(),
        scenario.test_configs.len(),
        generated.pairs.len(),
        sig6(scenario.alpha_true)
    );
    Ok(())
}

/// Camera poses and diagnostics of a global alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosesFile {
    #[serde(with = "row_major::list")]
    pub camera_poses: Vec<Transform3>,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub dense_ply: PathBuf,
}

pub fn cmd_align(ctx: &Context, args: &AlignArgs) -> CliResult {
    let mut opts = ctx.config.align.clone().unwrap_or_default();
    if let Some(v) = args.max_iters {
        opts.max_iters = v;
    }
    if let Some(v) = args.learning_rate {
        opts.learning_rate = v;
    }
    if let Some(v) = args.conf_threshold {
        opts.conf_threshold = v;
    }
    let preds = load_manifest(&args.manifest)?;
    let result = global_align(&preds, &opts)?;
    create_dir(&args.out_dir)?;
    ply::write_ply(&args.out_dir.join("dense.ply"), &result.dense)?;
    write_json(
        &args.out_dir.join("poses.json"),
        &PosesFile {
            camera_poses: result.camera_poses.clone(),
            final_loss: result.final_loss,
            initial_loss: result.initial_loss,
            iterations: result.iterations,
            converged: result.converged,
            dense_ply: "dense.ply".into(),
        },
    )?;
    println!("initial loss {}", sig6(result.initial_loss));
    println!("final loss {}", sig6(result.final_loss));
    println!("iterations {}", result.iterations);
    println!("converged {}", result.converged);
    println!("dense points {}", result.dense.len());
    if opts.max_iters == 0 {
        warn!("max_iters is 0; the output is the initialization");
        println!("diagnostic: initialization only");
    }
    if let Some(ee_path) = &args.ee_poses {
        let intr_path = args
            .intrinsics
            .as_ref()
            .expect("clap enforces --intrinsics");
        let raw: Vec<Vec<f64>> = read_json(ee_path)?;
        let ee_poses = raw
            .iter()
            .map(|v| Transform3::from_row_major(v))
            .collect::<graspalign::Result<Vec<_>>>()?;
        let intrinsics: Intrinsics = read_json(intr_path)?;
        let problem = AlignmentProblem {
            ee_poses,
            cam_obj_poses: result
                .camera_poses
                .iter()
                .map(CameraObjectPose::from_camera_pose)
                .collect(),
            dense: result.dense.clone(),
            intrinsics,
            render_subsample: 1,
        };
        problem.validate()?;
        let path = coord_align::write_problem(&args.out_dir, "problem", &problem)?;
        println!("problem written to {}", path.display());
    }
    if let Some(t) = args.loss_threshold {
        if !(result.final_loss <= t) {
            return Err(CliError {
                code: EXIT_DIVERGENCE,
                message: format!(
                    "final loss {} exceeds threshold {}",
                    sig6(result.final_loss),
                    sig6(t)
                ),
            });
        }
    }
    Ok(())
}

fn regressor_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_regressor.json"))
}

pub fn cmd_solve(ctx: &Context, args: &SolveArgs) -> CliResult {
    let solve_cfg = ctx.config.solve.clone().unwrap_or_default();
    let method = args.method.or(solve_cfg.method).unwrap_or(Method::Rendered);
    let mut opts = solve_cfg.solver.unwrap_or_default();
    opts.seed = ctx.seed;
    if let Some(v) = args.starts {
        opts.n_starts = v;
    }
    if let Some(v) = args.max_iters {
        opts.max_iters = v;
    }
    if let Some(v) = args.render_subsample {
        opts.render_subsample = v;
    }
    let mut reg = ctx.config.regressor.clone().unwrap_or_default();
    reg.seed = ctx.seed;

    let problem = coord_align::read_problem(&args.problem)?;
    let fitted = fit(method, &problem, &opts, &reg)?;
    let sol = &fitted.solution;

    let mut file = SolutionFile::from_solution(sol, method.name());
    file.problem = Some(
        std::fs::canonicalize(&args.problem)
            .map_err(|e| input_error(format!("{}: {e}", args.problem.display())))?,
    );
    if let Some(params) = &fitted.regressor {
        let path = regressor_path(&args.out);
        write_json(&path, params)?;
        file.regressor = Some(PathBuf::from(path.file_name().expect("file name")));
        println!("regressor written to {}", path.display());
    }
    write_json(&args.out, &file)?;

    println!("method {method}");
    if !sol.start_losses.is_empty() {
        let starts: Vec<String> = sol.start_losses.iter().map(|l| sig6(*l)).collect();
        println!("start losses [{}]", starts.join(", "));
        let best = sol
            .start_losses
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        println!("best start loss {}", sig6(best));
    }
    println!("final loss {} px", sig6(sol.final_loss));
    if fitted.regressor.is_none() {
        println!("alpha {}", sig6(sol.alpha));
        println!("cam_base spread {}", sig6(sol.cam_base.spread));
    }
    if let Some(gt_path) = &args.ground_truth {
        let gt: synth::GroundTruth = read_json(gt_path)?;
        println!("alpha error {}", sig6((sol.alpha - gt.alpha).abs()));
        println!(
            "alpha relative error {}",
            sig6((sol.alpha / gt.alpha - 1.0).abs())
        );
        println!(
            "H rotation error {} deg",
            sig6(sol.h.rotation.angle_to(&gt.h_true.rotation).to_degrees())
        );
        println!(
            "H translation error {} m",
            sig6((sol.h.translation - gt.h_true.translation).norm())
        );
    }
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn load_solution(
    path: &Path,
) -> CliResult<(SolutionFile, AlignmentProblem, Option<RegressorParams>)> {
    let file: SolutionFile = read_json(path)?;
    let problem_path = file.problem.as_ref().ok_or_else(|| {
        input_error(format!(
            "{}: solution does not name its problem",
            path.display()
        ))
    })?;
    let problem = coord_align::read_problem(&resolve(path, problem_path))?;
    let regressor = match &file.regressor {
        Some(r) => {
            let params: RegressorParams = read_json(&resolve(path, r))?;
            params.validate()?;
            Some(params)
        }
        None => None,
    };
    Ok((file, problem, regressor))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub object: String,
    pub method: String,
    #[serde(rename = "mean_D_hat")]
    pub mean_d_hat: f64,
    pub per_pose: Vec<graspalign::metrics::MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub fn cmd_evaluate(ctx: &Context, args: &EvaluateArgs) -> CliResult {
    let subsample = args
        .subsample
        .or(ctx.config.evaluate.as_ref().and_then(|e| e.subsample))
        .unwrap_or(1);
    let (file, problem, regressor) = load_solution(&args.solution)?;
    let (truth, masks) = synth::load_testset(&args.testset_dir)?;
    let predictor = match &regressor {
        Some(params) => PosePredictor::Regression {
            params,
            train: &problem,
        },
        None => PosePredictor::Structured {
            h: file.h,
            alpha: file.alpha,
            train: &problem,
        },
    };
    let k = truth.intrinsics;
    let report = evaluate_test_set(&predictor, &truth.test_ee_poses, &masks, &k, subsample)?;

    let overlay_dir = args
        .overlays
        .clone()
        .unwrap_or_else(|| args.report.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&overlay_dir)?;
    for (i, (ee, mask)) in truth.test_ee_poses.iter().zip(&masks).enumerate() {
        let (cloud, pose) = predictor.predict(ee)?;
        render_overlay(
            &cloud,
            &pose,
            &k,
            mask,
            &overlay_dir.join(format!("overlay_{i:03}.ppm")),
        )?;
    }

    let object = std::fs::read_to_string(args.testset_dir.join("scenario.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<ScenarioSpec>(&t).ok())
        .map(|s| object_name(&s))
        .unwrap_or_else(|| "unknown".into());
    for (i, r) in report.per_pose.iter().enumerate() {
        println!("pose {i}: D_hat {} px", sig6(r.d_hat));
    }
    println!("mean D_hat {} px", sig6(report.mean_d_hat));
    write_json(
        &args.report,
        &Report {
            rows: vec![ReportRow {
                object,
                method: file.method,
                mean_d_hat: report.mean_d_hat,
                per_pose: report.per_pose,
            }],
        },
    )
}

fn object_name(spec: &ScenarioSpec) -> String {
    serde_json::to_value(&spec.object)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PourResult {
    pub q_goal: Vec<f64>,
    pub pivot_base: [f64; 3],
    pub pivot_displacement: f64,
}

pub fn cmd_pour(ctx: &Context, args: &PourArgs) -> CliResult {
    let cfg = ctx.config.pour.clone().unwrap_or_default();
    let file: SolutionFile = read_json(&args.solution)?;
    if file.regressor.is_some() {
        return Err(input_error(
            "pouring needs a structured solution, not a regressor",
        ));
    }
    let chain = ChainSpec::read(&args.chain)?;
    let q0 = args
        .q0
        .clone()
        .map(|j| j.0)
        .ok_or_else(|| input_error("--q0 is required"))?;
    let axis = args
        .axis
        .or(cfg.axis.map(Vec3::from))
        .unwrap_or_else(|| Vec3::new(0.0, 1.0, 0.0));
    if !(axis.norm() > 0.0) {
        return Err(input_error("rotation axis must be nonzero"));
    }
    let angle = args
        .angle_deg
        .or(cfg.angle_deg)
        .unwrap_or(45.0)
        .to_radians();
    let ik_opts = cfg.ik.unwrap_or_default();

    let current = kinematics::object_pose(&chain, &q0, &file.h)?;
    let (pivot, local) = match (args.pivot, args.pivot_object) {
        (Some(p), _) => (p, current.inverse().apply(&p)),
        (None, Some(l)) => (current.apply(&l), l),
        (None, None) => return Err(input_error("one of --pivot or --pivot-object is required")),
    };
    let goal = kinematics::pivot_goal(&current, &pivot, &axis, angle);
    let q = kinematics::psi_inverse(&chain, &goal, &file.h, &q0, &ik_opts)?;
    let after = kinematics::psi(&chain, &q, &file.h, &[local])?[0];
    let displacement = (after - pivot).norm();

    let qs: Vec<String> = q.iter().map(|v| sig6(*v)).collect();
    println!("goal configuration [{}]", qs.join(", "));
    println!("pivot displacement {} m", sig6(displacement));
    if let Some(out) = &args.out {
        write_json(
            out,
            &PourResult {
                q_goal: q,
                pivot_base: pivot.into(),
                pivot_displacement: displacement,
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(123.456789), "123.457");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-2.5), "-2.50000");
    }

    #[test]
    fn error_codes() {
        assert_eq!(
            CliError::from(Error::DisconnectedGraph("x".into())).code,
            EXIT_GRAPH
        );
        assert_eq!(
            CliError::from(Error::Divergence("x".into())).code,
            EXIT_DIVERGENCE
        );
        assert_eq!(
            CliError::from(Error::IkNotConverged {
                iterations: 1,
                residual: 1.0,
                best: vec![]
            })
            .code,
            EXIT_IK
        );
        assert_eq!(CliError::from(Error::NoSupervisingPixels).code, EXIT_INPUT);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "nope": true}"#).is_err());
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 4, "solve": {"method": "no-render"}}"#).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.solve.unwrap().method, Some(Method::NoRender));
    }
}
