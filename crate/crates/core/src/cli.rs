//! Command-line verbs. The binary only parses arguments, sets up logging and
//! calls [`run`]; everything else lives here so it can be driven in-process.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::adjust::shape_adjust_from;
use crate::align::diameter;
use crate::config::{PipelineConfig, CONFIG_ENV};
use crate::energy::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::geometry::{azimuth, project, rotation_angle_between, Intrinsics, QuatPose, Vec2, Vec3};
use crate::io::{
    self, finite, join, points2, points3, AnnotationFile, GroundTruthFile, GroundTruthRecord, IntrinsicsFile,
    KeypointsFile, PoseFile, PoseInstance, PoseRecord, ReconstructionFile, ReconstructionRecord, Status,
    FORMAT_VERSION,
};
use crate::metrics::{aop, apk, hausdorff, mean_abs_angle_error, BBox, MetricReport, Viewpoint};
use crate::pose::irls_pose;
use crate::prior::{car_layout, car_prior, nrsfm_fit, variance_explained, CarParams, EmConfig, ShapePrior};
use crate::synth::synth_generate;

#[derive(Debug, Parser)]
#[command(name = "monoshape", version, about = "Vehicle pose and shape from 2D keypoints")]
pub struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Seed for commands that draw random numbers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: config `paths.out`, else the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a shape prior from 2D keypoint annotations.
    LearnPrior(LearnPriorArgs),
    /// Estimate object poses from keypoint detections.
    EstimatePose(EstimatePoseArgs),
    /// Adjust instance shapes at fixed poses.
    AdjustShape(AdjustShapeArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct LearnPriorArgs {
    /// 2D annotations file.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Number of basis vectors to keep.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub basis_size: Option<u64>,
    /// Prior file whose keypoint layout (names, faces, symmetry) to use;
    /// the built-in car layout otherwise.
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimatePoseArgs {
    /// Prior file; the built-in car prior when absent.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Keypoint detections file.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    /// Intrinsics file; defaults to `intrinsics.json` next to the keypoints.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// IRLS iterations.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Ground-truth file; adds rotation errors to the summary.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdjustShapeArgs {
    /// Prior file; the built-in car prior when absent.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Keypoint detections file.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    /// Poses file from estimate-pose.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Intrinsics file; defaults to `intrinsics.json` next to the keypoints.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Weight of the reprojection term.
    #[arg(long)]
    pub eta_reproj: Option<f64>,
    /// Weight of the face planarity term.
    #[arg(long)]
    pub eta_planar: Option<f64>,
    /// Weight of the mirror symmetry term.
    #[arg(long)]
    pub eta_sym: Option<f64>,
    /// Weight of the dimension prior term.
    #[arg(long)]
    pub eta_dim: Option<f64>,
    /// Weight of the Laplacian smoothness term.
    #[arg(long)]
    pub eta_lap: Option<f64>,
    /// Weight-update rounds after the first solve.
    #[arg(long)]
    pub irls_rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with `reconstructions.json` or `poses.json`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory with `ground_truth.json`.
    #[arg(long)]
    pub gt: PathBuf,
    /// APK radius as a fraction of the larger box side.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// AOP box-overlap threshold.
    #[arg(long, default_value_t = 0.7)]
    pub iou: f64,
    /// AOP angle thresholds in degrees.
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 15.0, 30.0])]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Prior to sample from; the built-in car prior when absent.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Number of instances.
    #[arg(long)]
    pub count: Option<usize>,
    /// Pixel noise sigma.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fraction of visible keypoints displaced by a gross error.
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    /// Fraction of keypoints marked invisible.
    #[arg(long)]
    pub occlusion_fraction: Option<f64>,
}

/// How a batch command ended when it did not return an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Every instance failed; outputs were still written.
    AllFailed,
}

/// Log level from the flag, else the config, else `info`.
pub fn log_level(cli: &Cli) -> String {
    if let Some(l) = &cli.log_level {
        return l.clone();
    }
    PipelineConfig::resolve(cli.config.as_deref())
        .map(|c| c.log_level)
        .unwrap_or_else(|_| "info".into())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref())?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_default();
    let ctx = Context { cfg, out_dir, seed: cli.seed };
    match &cli.command {
        Command::LearnPrior(a) => learn_prior(&ctx, a, out),
        Command::EstimatePose(a) => estimate_pose(&ctx, a, out),
        Command::AdjustShape(a) => adjust_shape(&ctx, a, out),
        Command::Eval(a) => eval(&ctx, a, out),
        Command::Synth(a) => synth(&ctx, a, out),
    }
}

struct Context {
    cfg: PipelineConfig,
    out_dir: PathBuf,
    seed: Option<u64>,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        join(&self.out_dir, name)
    }

    fn required(&self, flag: &Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| cfg.clone())
            .ok_or_else(|| Error::InvalidConfig(format!("no {what} file given (flag or config paths.{what})")))
    }

    fn prior(&self, flag: &Option<PathBuf>) -> Result<ShapePrior> {
        match flag.as_ref().or(self.cfg.paths.prior.as_ref()) {
            Some(p) => io::read_prior(p),
            None => {
                info!("using the built-in car prior with {} basis vectors", self.cfg.basis_size);
                car_prior(&CarParams::default(), self.cfg.basis_size)
            }
        }
    }

    fn intrinsics(&self, flag: &Option<PathBuf>, keypoints: &Path) -> Result<Intrinsics> {
        if let Some(p) = flag.as_ref().or(self.cfg.paths.intrinsics.as_ref()) {
            return io::read_intrinsics(p);
        }
        if let Some([fx, fy, cx, cy]) = self.cfg.intrinsics {
            return Intrinsics::new(fx, fy, cx, cy);
        }
        let sibling = keypoints.with_file_name("intrinsics.json");
        if sibling.exists() {
            return io::read_intrinsics(&sibling);
        }
        Err(Error::InvalidConfig(
            "no intrinsics: pass --intrinsics, set config intrinsics, or place intrinsics.json next to the keypoints".into(),
        ))
    }
}

fn learn_prior(ctx: &Context, a: &LearnPriorArgs, out: &mut dyn Write) -> Result<Outcome> {
    let basis_size = a.basis_size.map(|b| b as usize).unwrap_or(ctx.cfg.basis_size);
    if basis_size == 0 {
        return Err(Error::InvalidConfig("basis size must be at least 1".into()));
    }
    let path = ctx.required(&a.annotations, &ctx.cfg.paths.annotations, "annotations")?;
    let layout = match &a.layout {
        Some(p) => io::read_prior(p)?.layout,
        None => car_layout(),
    };
    let file: AnnotationFile = io::read_json(&path)?;
    let set = file.to_set(&layout.names)?;
    if set.instances.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 annotated instances, got {}",
            set.instances.len()
        )));
    }
    let fit = nrsfm_fit(&set, &layout, basis_size, &EmConfig::default())?;
    for w in &fit.report.warnings {
        warn!("{w}");
    }
    if fit.report.rank_deficient {
        warn!("annotations are rank deficient for {basis_size} basis vectors");
    }
    for (id, n) in &fit.report.rejected {
        warn!("instance {id} left out: {n} visible keypoints");
    }
    let dest = ctx.out("prior.json");
    io::write_prior(&dest, &fit.prior)?;

    writeln!(out, "learned a {basis_size}-vector prior from {} instances", fit.instances.len())?;
    writeln!(out, "EM iterations: {} (converged: {})", fit.report.iterations, fit.report.converged)?;
    if let Some(rms) = fit.report.refined_rms {
        writeln!(out, "reprojection RMS after refinement: {rms:.6e} px")?;
    }
    writeln!(out, "{:>6}  {:>18}", "basis", "variance explained")?;
    for n in 1..=basis_size {
        writeln!(out, "{n:>6}  {:>18.7}", variance_explained(&fit.prior, n)?)?;
    }
    writeln!(out, "wrote {}", dest.display())?;
    Ok(Outcome::Success)
}

fn projected(shape: &[Vec3], pose: &QuatPose, k: &Intrinsics) -> Vec<Option<[f64; 2]>> {
    shape
        .iter()
        .map(|x| project(x, pose, k).ok().map(|p| [p.x, p.y]))
        .collect()
}

fn estimate_pose(ctx: &Context, a: &EstimatePoseArgs, out: &mut dyn Write) -> Result<Outcome> {
    let prior = ctx.prior(&a.prior)?;
    let kp_path = ctx.required(&a.keypoints, &ctx.cfg.paths.keypoints, "keypoints")?;
    let k = ctx.intrinsics(&a.intrinsics, &kp_path)?;
    let mut irls = ctx.cfg.irls;
    if let Some(m) = a.max_iters {
        irls.max_iters = m;
    }
    irls.validate()?;
    let file: KeypointsFile = io::read_json(&kp_path)?;

    let mut records = Vec::with_capacity(file.instances.len());
    for det in &file.instances {
        let obs = det.observations(&prior.layout.names)?;
        let init = det.init_pose.as_ref().map(PoseRecord::to_pose).transpose()?;
        let rec = match irls_pose(&prior, &obs, &k, &irls, init.as_ref()) {
            Ok(r) => PoseInstance {
                id: det.id.clone(),
                status: Status::Ok,
                reason: None,
                pose: Some((&r.pose).into()),
                azimuth_deg: Some(azimuth(&r.pose.rotation()?).to_degrees()),
                residuals: r.residuals.iter().map(|&e| finite(e)).collect(),
                weights: r.weights,
                iterations: r.iterations,
                final_cost: finite(r.final_cost),
                projected: projected(&prior.mean, &r.pose, &k),
            },
            Err(Error::TooFewPoints { .. }) => PoseInstance::failed(&det.id, "insufficient keypoints"),
            Err(e) => PoseInstance::failed(&det.id, e.to_string()),
        };
        if let Some(reason) = &rec.reason {
            warn!("instance {}: {reason}", det.id);
        }
        records.push(rec);
    }
    let dest = ctx.out("poses.json");
    io::write_json(
        &dest,
        &PoseFile {
            format_version: FORMAT_VERSION.into(),
            instances: records.clone(),
        },
    )?;

    let ok = records.iter().filter(|r| r.status == Status::Ok).count();
    writeln!(out, "poses: {ok} estimated, {} failed", records.len() - ok)?;
    for r in records.iter().filter(|r| r.status == Status::Failed) {
        writeln!(out, "  {}: {}", r.id, r.reason.as_deref().unwrap_or(""))?;
    }
    if let Some(gt) = &a.gt {
        let gt: GroundTruthFile = io::read_json(gt)?;
        let truth: BTreeMap<&str, &GroundTruthRecord> = gt.instances.iter().map(|g| (g.id.as_str(), g)).collect();
        let mut errs = Vec::new();
        for r in &records {
            if let (Some(p), Some(g)) = (&r.pose, truth.get(r.id.as_str())) {
                let e = rotation_angle_between(&p.to_pose()?.rotation()?, &g.pose.to_pose()?.rotation()?);
                errs.push(e.to_degrees());
            }
        }
        if !errs.is_empty() {
            errs.sort_by(f64::total_cmp);
            let within = errs.iter().filter(|&&e| e < 5.0).count();
            writeln!(
                out,
                "rotation error vs ground truth: median {:.4} deg, {within}/{} within 5 deg",
                errs[errs.len() / 2],
                errs.len()
            )?;
        }
    }
    writeln!(out, "wrote {}", dest.display())?;
    Ok(if ok == 0 && !records.is_empty() {
        Outcome::AllFailed
    } else {
        Outcome::Success
    })
}

fn breakdown_line(e: &EnergyBreakdown) -> String {
    format!(
        "total {:.6e}  reproj {:.6e}  planar {:.6e}  sym {:.6e}  dim {:.6e}  lap {:.6e}",
        e.total, e.reproj, e.planar, e.sym, e.dim, e.lap
    )
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn adjust_shape(ctx: &Context, a: &AdjustShapeArgs, out: &mut dyn Write) -> Result<Outcome> {
    let prior = ctx.prior(&a.prior)?;
    let kp_path = ctx.required(&a.keypoints, &ctx.cfg.paths.keypoints, "keypoints")?;
    let pose_path = ctx.required(&a.poses, &ctx.cfg.paths.poses, "poses")?;
    let k = ctx.intrinsics(&a.intrinsics, &kp_path)?;
    let mut cfg = ctx.cfg.energy.clone();
    for (slot, flag) in [
        (&mut cfg.eta_reproj, a.eta_reproj),
        (&mut cfg.eta_planar, a.eta_planar),
        (&mut cfg.eta_sym, a.eta_sym),
        (&mut cfg.eta_dim, a.eta_dim),
        (&mut cfg.eta_lap, a.eta_lap),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(r) = a.irls_rounds {
        cfg.irls_rounds = r;
    }
    cfg.validate()?;
    let file: KeypointsFile = io::read_json(&kp_path)?;
    let poses: PoseFile = io::read_json(&pose_path)?;
    let by_id: BTreeMap<&str, &PoseInstance> = poses.instances.iter().map(|p| (p.id.as_str(), p)).collect();
    let edges = prior.topology().edges();

    let mut records = Vec::with_capacity(file.instances.len());
    for det in &file.instances {
        let obs = det.observations(&prior.layout.names)?;
        let pose_rec = match by_id.get(det.id.as_str()) {
            None => {
                records.push(ReconstructionRecord::failed(&det.id, "no pose record"));
                continue;
            }
            Some(p) => *p,
        };
        let pose = match (&pose_rec.status, &pose_rec.pose) {
            (Status::Ok, Some(p)) => p.to_pose()?,
            _ => {
                let why = pose_rec.reason.as_deref().unwrap_or("no pose");
                records.push(ReconstructionRecord::failed(&det.id, format!("pose estimation failed: {why}")));
                continue;
            }
        };
        let weights = (pose_rec.weights.len() == prior.num_keypoints()).then_some(pose_rec.weights.as_slice());
        let rec = match shape_adjust_from(&prior, &obs, &pose, &k, &cfg, weights) {
            Ok(r) => r,
            Err(e) => {
                warn!("instance {}: {e}", det.id);
                records.push(ReconstructionRecord::failed(&det.id, e.to_string()));
                continue;
            }
        };
        if rec.diverged {
            warn!("instance {}: solver diverged ({})", det.id, rec.diagnostics.join("; "));
        }
        let obj = format!("{}.obj", file_stem(&det.id));
        io::write_obj(&ctx.out(&obj), &rec.keypoints3d, &edges)?;
        writeln!(out, "{}", det.id)?;
        writeln!(out, "  before  {}", breakdown_line(&rec.initial_energy))?;
        writeln!(out, "  after   {}", breakdown_line(&rec.energy_breakdown))?;
        records.push(ReconstructionRecord {
            id: det.id.clone(),
            status: Status::Ok,
            reason: None,
            pose: Some((&pose).into()),
            lambda: rec.lambda.0.iter().copied().collect(),
            planes: rec.planes.iter().map(Into::into).collect(),
            keypoints3d: points3(&rec.keypoints3d),
            kp_weights: rec.kp_weights.clone(),
            energy_before: Some(rec.initial_energy),
            energy_after: Some(rec.energy_breakdown),
            diverged: rec.diverged,
            diagnostics: rec.diagnostics.clone(),
            projected: projected(&rec.keypoints3d, &pose, &k),
            obj: Some(obj),
        });
    }
    let dest = ctx.out("reconstructions.json");
    io::write_json(
        &dest,
        &ReconstructionFile {
            format_version: FORMAT_VERSION.into(),
            instances: records.clone(),
        },
    )?;
    let ok = records.iter().filter(|r| r.status == Status::Ok).count();
    writeln!(out, "shapes: {ok} adjusted, {} failed", records.len() - ok)?;
    for r in records.iter().filter(|r| r.status == Status::Failed) {
        writeln!(out, "  {}: {}", r.id, r.reason.as_deref().unwrap_or(""))?;
    }
    writeln!(out, "wrote {}", dest.display())?;
    Ok(if ok == 0 && !records.is_empty() {
        Outcome::AllFailed
    } else {
        Outcome::Success
    })
}

/// One scored prediction: pose, projected keypoints, optional 3D shape.
struct Prediction {
    pose: QuatPose,
    projected: Vec<Option<Vec2>>,
    shape: Option<Vec<Vec3>>,
}

fn opt_points(v: &[Option<[f64; 2]>]) -> Vec<Option<Vec2>> {
    v.iter().map(|p| p.map(Vec2::from)).collect()
}

fn load_predictions(dir: &Path) -> Result<(BTreeMap<String, Prediction>, Vec<String>, &'static str)> {
    let mut preds = BTreeMap::new();
    let mut failed = Vec::new();
    let recon = dir.join("reconstructions.json");
    if recon.exists() {
        let file: ReconstructionFile = io::read_json(&recon)?;
        for r in file.instances {
            match (&r.status, &r.pose) {
                (Status::Ok, Some(p)) => {
                    let pred = Prediction {
                        pose: p.to_pose()?,
                        projected: opt_points(&r.projected),
                        shape: Some(r.keypoints3d.iter().map(|x| Vec3::from(*x)).collect()),
                    };
                    preds.insert(r.id, pred);
                }
                _ => failed.push(r.id),
            }
        }
        return Ok((preds, failed, "reconstructions"));
    }
    let file: PoseFile = io::read_json(&dir.join("poses.json"))?;
    for r in file.instances {
        match (&r.status, &r.pose) {
            (Status::Ok, Some(p)) => {
                let pred = Prediction {
                    pose: p.to_pose()?,
                    projected: opt_points(&r.projected),
                    shape: None,
                };
                preds.insert(r.id, pred);
            }
            _ => failed.push(r.id),
        }
    }
    Ok((preds, failed, "poses"))
}

fn posed(shape: &[Vec3], pose: &QuatPose) -> Result<Vec<Vec3>> {
    let r = pose.rotation()?;
    Ok(shape.iter().map(|x| r * x + pose.t).collect())
}

fn eval(ctx: &Context, a: &EvalArgs, out: &mut dyn Write) -> Result<Outcome> {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidConfig("angle thresholds must be nonnegative".into()));
    }
    let (preds, failed, source) = load_predictions(&a.pred)?;
    let gt: GroundTruthFile = io::read_json(&a.gt.join("ground_truth.json"))?;
    let gt_ids: BTreeMap<&str, &GroundTruthRecord> = gt.instances.iter().map(|g| (g.id.as_str(), g)).collect();

    let mut unmatched: Vec<String> = preds.keys().filter(|id| !gt_ids.contains_key(id.as_str())).cloned().collect();
    unmatched.extend(gt_ids.keys().filter(|id| !preds.contains_key(**id)).map(|s| s.to_string()));
    unmatched.sort();
    unmatched.dedup();
    if !unmatched.is_empty() {
        warn!("{} unmatched instance ids excluded: {}", unmatched.len(), unmatched.join(", "));
    }
    for id in &failed {
        warn!("instance {id} has no prediction");
    }

    let mut vp_pred = Vec::new();
    let mut vp_gt = Vec::new();
    let mut rot_err = Vec::new();
    let mut kp_pred = Vec::new();
    let mut kp_gt = Vec::new();
    let mut boxes = Vec::new();
    let mut haus = Vec::new();
    for g in &gt.instances {
        let Some(p) = preds.get(&g.id) else { continue };
        let gpose = g.pose.to_pose()?;
        let gproj: Vec<Vec2> = g.projected.iter().map(|x| Vec2::from(*x)).collect();
        let gbox = BBox::around(gproj.iter().copied())
            .ok_or_else(|| Error::Schema(format!("ground truth {} has no keypoints", g.id)))?;
        let pbox = BBox::around(p.projected.iter().flatten().copied()).unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
        let (pr, gr) = (p.pose.rotation()?, gpose.rotation()?);
        vp_pred.push(Viewpoint {
            bbox: pbox,
            azimuth_deg: azimuth(&pr).to_degrees(),
        });
        vp_gt.push(Viewpoint {
            bbox: gbox,
            azimuth_deg: azimuth(&gr).to_degrees(),
        });
        rot_err.push(rotation_angle_between(&pr, &gr).to_degrees());
        let mut pk = p.projected.clone();
        pk.resize(gproj.len(), None);
        kp_pred.push(pk);
        kp_gt.push(
            gproj
                .iter()
                .enumerate()
                .map(|(i, x)| (!g.hidden.contains(&i)).then_some(*x))
                .collect::<Vec<_>>(),
        );
        boxes.push(gbox);
        if let Some(shape) = &p.shape {
            let gshape: Vec<Vec3> = g.keypoints3d.iter().map(|x| Vec3::from(*x)).collect();
            haus.push(hausdorff(&posed(shape, &p.pose)?, &posed(&gshape, &gpose)?)?);
        }
    }
    if vp_gt.is_empty() {
        return Err(Error::UndefinedMetric("no instance ids in common between predictions and ground truth".into()));
    }
    let aop_rows = a
        .thresholds
        .iter()
        .map(|&t| Ok((t, aop(&vp_pred, &vp_gt, t, a.iou)?)))
        .collect::<Result<Vec<_>>>()?;
    let az_p: Vec<f64> = vp_pred.iter().map(|v| v.azimuth_deg).collect();
    let az_g: Vec<f64> = vp_gt.iter().map(|v| v.azimuth_deg).collect();
    let mut missing = unmatched.clone();
    missing.extend(failed.iter().filter(|id| gt_ids.contains_key(id.as_str())).cloned());
    missing.sort();
    missing.dedup();
    let report = MetricReport {
        instances: vp_gt.len(),
        aop: aop_rows,
        mean_abs_angle_error: mean_abs_angle_error(&az_p, &az_g)?,
        mean_rotation_error: Some(rot_err.iter().sum::<f64>() / rot_err.len() as f64),
        apk: Some(apk(&kp_pred, &kp_gt, &boxes, a.alpha)?),
        hausdorff: (!haus.is_empty()).then(|| haus.iter().sum::<f64>() / haus.len() as f64),
        unmatched: missing,
    };
    let table = report.table(&gt.keypoint_names);
    io::write_json(
        &ctx.out("metrics.json"),
        &EvalFile {
            format_version: FORMAT_VERSION.into(),
            source: source.into(),
            alpha: a.alpha,
            iou_threshold: a.iou,
            report,
        },
    )?;
    io::write_atomic(&ctx.out("metrics.txt"), table.as_bytes())?;
    write!(out, "{table}")?;
    Ok(Outcome::Success)
}

/// Output of `eval`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalFile {
    pub format_version: String,
    /// `reconstructions` or `poses`.
    pub source: String,
    pub alpha: f64,
    pub iou_threshold: f64,
    pub report: MetricReport,
}

fn synth(ctx: &Context, a: &SynthArgs, out: &mut dyn Write) -> Result<Outcome> {
    let prior = ctx.prior(&a.prior)?;
    let mut cfg = ctx.cfg.synth.clone();
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.count {
        cfg.instance_count = n;
    }
    if let Some(v) = a.noise {
        cfg.pixel_noise_sigma = v;
    }
    if let Some(v) = a.outlier_fraction {
        cfg.outlier_fraction = v;
    }
    if let Some(v) = a.occlusion_fraction {
        cfg.occlusion_fraction = v;
    }
    let data = synth_generate(&prior, &cfg)?;
    let names = &prior.layout.names;
    let k = data.intrinsics;

    io::write_json(&ctx.out("annotations.json"), &AnnotationFile::from_set(&data.annotations(names)))?;
    let obs: Vec<_> = data.instances.iter().map(|i| (i.id.clone(), i.observations.clone())).collect();
    io::write_json(&ctx.out("keypoints.json"), &KeypointsFile::from_observations(names, &obs))?;
    io::write_json(&ctx.out("intrinsics.json"), &IntrinsicsFile::from_intrinsics(&k))?;
    let mut truth = Vec::with_capacity(data.instances.len());
    for inst in &data.instances {
        let exact = inst
            .shape
            .iter()
            .map(|x| project(x, &inst.pose, &k))
            .collect::<Result<Vec<_>>>()?;
        truth.push(GroundTruthRecord {
            id: inst.id.clone(),
            pose: (&inst.pose).into(),
            azimuth_deg: azimuth(&inst.pose.rotation()?).to_degrees(),
            lambda: inst.lambda.0.iter().copied().collect(),
            keypoints3d: points3(&inst.shape),
            projected: points2(&exact),
            outliers: inst.outliers.clone(),
            hidden: inst.hidden.clone(),
        });
    }
    io::write_json(
        &ctx.out("ground_truth.json"),
        &GroundTruthFile {
            format_version: FORMAT_VERSION.into(),
            keypoint_names: names.clone(),
            instances: truth,
        },
    )?;
    let mean_diam = if data.instances.is_empty() {
        0.0
    } else {
        data.instances.iter().map(|i| diameter(&i.shape)).sum::<f64>() / data.instances.len() as f64
    };
    writeln!(
        out,
        "synthesized {} instances (seed {}, noise {} px, outliers {}, occlusion {}), mean diameter {mean_diam:.4} m",
        data.instances.len(),
        cfg.seed,
        cfg.pixel_noise_sigma,
        cfg.outlier_fraction,
        cfg.occlusion_fraction
    )?;
    writeln!(out, "wrote annotations.json, keypoints.json, intrinsics.json, ground_truth.json to {}", ctx.out_dir.display())?;
    Ok(Outcome::Success)
}
