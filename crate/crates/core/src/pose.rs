//! Robust perspective pose: weighted PnP inside an IRLS loop whose weights
//! mix detector confidence, ray-traced visibility and reprojection error.

use nalgebra::{DMatrix, DVector, Matrix3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_rotation_jacobian, quat_to_rotation, Intrinsics, QuatPose, Vec2, Vec3};
use crate::lm::{minimize, LeastSquaresProblem, LmOptions};
use crate::mesh::{vertex_occluded, QuadMesh};
use crate::prior::ShapePrior;

/// Points closer to the camera plane than this (meters) make a pose infeasible.
pub const MIN_DEPTH: f64 = 1e-3;

/// One detected 2D keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointObservation {
    pub index: usize,
    pub uv: Vec2,
    /// Detector confidence in `[0, 1]`.
    pub w_cnn: f64,
    pub visible: bool,
}

impl KeypointObservation {
    pub fn new(index: usize, uv: Vec2, w_cnn: f64, visible: bool) -> Self {
        Self {
            index,
            uv,
            w_cnn,
            visible,
        }
    }

    fn usable(&self) -> bool {
        self.uv.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlsConfig {
    /// Detector-confidence share of the initial weight.
    pub mu0: f64,
    /// Inertia of the weight update.
    pub mu1: f64,
    /// Error share (versus visibility) of the weight update.
    pub mu2: f64,
    pub max_iters: usize,
    pub weight_floor: f64,
    /// Visibility prior of an occluded keypoint.
    pub v_occ: f64,
    /// Reprojection errors are divided by `max(max_err, error_scale)` (pixels)
    /// before entering the update, so exact fits do not amplify round-off.
    pub error_scale: f64,
    /// Feed the normalized error itself, rather than `1 − e`, into the update.
    /// With this set, weights grow with error.
    pub literal_update: bool,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        Self {
            mu0: 0.9,
            mu1: 0.5,
            mu2: 0.9,
            max_iters: 5,
            weight_floor: 1e-3,
            v_occ: 0.1,
            error_scale: 1.0,
            literal_update: false,
        }
    }
}

impl IrlsConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.mu0) && unit(self.mu1) && unit(self.mu2)) {
            return Err(Error::InvalidConfig("mu0, mu1 and mu2 must lie in [0, 1]".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("IRLS max_iters must be at least 1".into()));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor <= 1.0) {
            return Err(Error::InvalidConfig("weight_floor must lie in (0, 1]".into()));
        }
        if !unit(self.v_occ) {
            return Err(Error::InvalidConfig("v_occ must lie in [0, 1]".into()));
        }
        if !(self.error_scale >= 0.0) {
            return Err(Error::InvalidConfig("error_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    pub pose: QuatPose,
    /// Final weight per keypoint; 0 for keypoints without a usable observation.
    pub weights: Vec<f64>,
    /// Reprojection error per keypoint in pixels; 0 for keypoints without a usable observation.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// `Σ w_i² ‖project(X_i) − x_i‖²` at the final pose and weights.
    pub final_cost: f64,
    /// Weight vector after the initial solve and after every update.
    pub weight_history: Vec<Vec<f64>>,
}

/// `μ₀·w_cnn + (1 − μ₀)·w_vis`, clamped to `[floor, 1]`.
pub fn weight_init(w_cnn: f64, w_vis: f64, mu0: f64, floor: f64) -> f64 {
    (mu0 * w_cnn + (1.0 - mu0) * w_vis).clamp(floor, 1.0)
}

/// `μ₁·w_prev + (1 − μ₁)·[μ₂·e + (1 − μ₂)·w_vis]`, clamped to `[floor, 1]`.
///
/// [`irls_pose`] passes `e = 1 − normalized error` unless
/// [`IrlsConfig::literal_update`] is set.
pub fn weight_update(w_prev: f64, e: f64, w_vis: f64, mu1: f64, mu2: f64, floor: f64) -> f64 {
    (mu1 * w_prev + (1.0 - mu1) * (mu2 * e + (1.0 - mu2) * w_vis)).clamp(floor, 1.0)
}

/// Ray-traced visibility prior: 1 if the segment from the camera center to
/// the keypoint crosses no face not incident to it, `v_occ` otherwise
/// (including keypoints at nonpositive depth).
pub fn visibility_prior(shape: &[Vec3], topology: &QuadMesh, pose: &QuatPose, v_occ: f64) -> Result<Vec<f64>> {
    if shape.len() != topology.vertex_count() {
        return Err(Error::DegenerateInput(format!(
            "shape has {} points, topology {} vertices",
            shape.len(),
            topology.vertex_count()
        )));
    }
    let r = pose.rotation()?;
    let eye = -(r.transpose() * pose.t);
    Ok((0..shape.len())
        .map(|i| {
            let depth = (r * shape[i] + pose.t).z;
            if depth <= 0.0 || vertex_occluded(&eye, shape, topology, i) {
                v_occ
            } else {
                1.0
            }
        })
        .collect())
}

struct PnpProblem<'a> {
    /// (object point, observed pixel, weight)
    pts: Vec<(Vec3, Vec2, f64)>,
    k: &'a Intrinsics,
}

impl LeastSquaresProblem for PnpProblem<'_> {
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let q = Vector4::new(x[0], x[1], x[2], x[3]);
        let r = quat_to_rotation(&q).ok()?;
        let t = Vec3::new(x[4], x[5], x[6]);
        let mut out = DVector::zeros(2 * self.pts.len());
        for (j, (p, uv, w)) in self.pts.iter().enumerate() {
            let pc = r * p + t;
            if pc.z <= MIN_DEPTH {
                return None;
            }
            let e = (self.k.project_unchecked(&pc) - uv) * *w;
            out[2 * j] = e.x;
            out[2 * j + 1] = e.y;
        }
        Some(out)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let q = Vector4::new(x[0], x[1], x[2], x[3]);
        let r = quat_to_rotation(&q).ok()?;
        let dr = quat_rotation_jacobian(&q);
        let t = Vec3::new(x[4], x[5], x[6]);
        let n = self.pts.len();
        let mut res = DVector::zeros(2 * n);
        let mut jac = DMatrix::zeros(2 * n, 7);
        for (j, (p, uv, w)) in self.pts.iter().enumerate() {
            let pc = r * p + t;
            if pc.z <= MIN_DEPTH {
                return None;
            }
            let e = (self.k.project_unchecked(&pc) - uv) * *w;
            res[2 * j] = e.x;
            res[2 * j + 1] = e.y;
            let jp = self.k.projection_jacobian(&pc) * *w;
            for (c, drc) in dr.iter().enumerate() {
                let d = jp * (drc * p);
                jac[(2 * j, c)] = d.x;
                jac[(2 * j + 1, c)] = d.y;
            }
            for c in 0..3 {
                jac[(2 * j, 4 + c)] = jp[(0, c)];
                jac[(2 * j + 1, 4 + c)] = jp[(1, c)];
            }
        }
        Some((res, jac))
    }

    fn retract(&self, x: &mut DVector<f64>) {
        let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]).sqrt();
        if n > 0.0 && n.is_finite() {
            for c in 0..4 {
                x[c] /= n;
            }
        }
    }
}

/// The 24 proper rotations mapping coordinate axes onto coordinate axes.
pub fn octahedral_rotations() -> Vec<Matrix3<f64>> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in perms {
        for signs in 0..8 {
            let mut m = Matrix3::zeros();
            for row in 0..3 {
                m[(row, p[row])] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Linear least-squares translation for a fixed rotation (algebraic error in
/// normalized coordinates); falls back to a mean-depth guess if the linear
/// solution puts any point behind the camera.
fn seed_translation(r: &Matrix3<f64>, pts: &[(Vec3, Vec2, f64)], k: &Intrinsics) -> Vec3 {
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    let mut norm_pts = Vec::with_capacity(pts.len());
    for (p, uv, w) in pts {
        let yn = (uv.y - k.cy) / k.fy;
        let xn = (uv.x - k.cx - k.skew * yn) / k.fx;
        let y = r * p;
        let w2 = w * w;
        // t_x − x̂ t_z = x̂ y_z − y_x ; t_y − ŷ t_z = ŷ y_z − y_y
        for (coef, rhs) in [
            (Vec3::new(1.0, 0.0, -xn), xn * y.z - y.x),
            (Vec3::new(0.0, 1.0, -yn), yn * y.z - y.y),
        ] {
            a += coef * coef.transpose() * w2;
            b += coef * rhs * w2;
        }
        norm_pts.push((y, Vec2::new(xn, yn), *w));
    }
    if let Some(t) = a.try_inverse().map(|inv| inv * b) {
        if t.iter().all(|v| v.is_finite()) && norm_pts.iter().all(|(y, _, _)| y.z + t.z > MIN_DEPTH) {
            return t;
        }
    }
    // mean-depth heuristic: image spread against object spread
    let wsum: f64 = norm_pts.iter().map(|(_, _, w)| w).sum::<f64>().max(1e-300);
    let yc = norm_pts.iter().map(|(y, _, w)| y * *w).sum::<Vec3>() / wsum;
    let xc = norm_pts.iter().map(|(_, x, w)| x * *w).sum::<Vec2>() / wsum;
    let spread3: f64 = norm_pts.iter().map(|(y, _, w)| w * (y - yc).xy().norm()).sum::<f64>() / wsum;
    let spread2: f64 = norm_pts.iter().map(|(_, x, w)| w * (x - xc).norm()).sum::<f64>() / wsum;
    let extent = norm_pts.iter().map(|(y, _, _)| (y - yc).norm()).fold(0.0, f64::max);
    let depth = if spread2 > 1e-12 { spread3 / spread2 } else { 10.0 }.max(2.0 * extent + MIN_DEPTH);
    Vec3::new(xc.x * depth - yc.x, xc.y * depth - yc.y, depth - yc.z)
}

fn collect_points(x: &[Vec3], obs: &[KeypointObservation], w: &[f64]) -> Result<Vec<(Vec3, Vec2, f64)>> {
    let mut pts = Vec::new();
    for o in obs {
        if o.index >= x.len() || o.index >= w.len() {
            return Err(Error::DegenerateInput(format!("keypoint index {} out of range", o.index)));
        }
        let wi = w[o.index];
        if o.usable() && wi > 0.0 {
            pts.push((x[o.index], o.uv, wi));
        }
    }
    Ok(pts)
}

fn weighted_cost(pose: &QuatPose, pts: &[(Vec3, Vec2, f64)], k: &Intrinsics) -> Option<f64> {
    let r = pose.rotation().ok()?;
    let mut c = 0.0;
    for (p, uv, w) in pts {
        let pc = r * p + pose.t;
        if pc.z <= MIN_DEPTH {
            return None;
        }
        c += w * w * (k.project_unchecked(&pc) - uv).norm_squared();
    }
    Some(c)
}

/// Iterations for each seed before the best candidates are polished.
const SEED_ITERS: usize = 12;
/// Number of seeds polished to convergence.
const POLISHED: usize = 3;

/// Weighted perspective-n-point.
///
/// Minimizes `Σ W_i² ‖project(X_i) − x_i‖²` over `(q, t)` by damped least
/// squares started from the 24 axis-aligned rotations and `init`. Each seed
/// gets a short run; the best few are refined to convergence and the lowest
/// cost wins, ties broken by seed order (`init` first). `w` is indexed by
/// keypoint; observations with zero weight or non-finite `uv` are ignored.
pub fn pnp_weighted(
    x: &[Vec3],
    obs: &[KeypointObservation],
    k: &Intrinsics,
    w: &[f64],
    init: Option<&QuatPose>,
) -> Result<QuatPose> {
    k.validate()?;
    let pts = collect_points(x, obs, w)?;
    if pts.len() < 4 {
        return Err(Error::TooFewPoints {
            required: 4,
            actual: pts.len(),
        });
    }
    // collinearity check on the object points in use
    let c = pts.iter().map(|p| p.0).sum::<Vec3>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for (p, _, _) in &pts {
        cov += (p - c) * (p - c).transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateConfiguration("object points are collinear".into()));
    }

    let problem = PnpProblem { pts, k };
    let mut seeds: Vec<DVector<f64>> = Vec::with_capacity(25);
    if let Some(p) = init {
        let p = p.canonical();
        seeds.push(DVector::from_iterator(7, p.q.iter().chain(p.t.iter()).copied()));
    }
    for r in octahedral_rotations() {
        let t = seed_translation(&r, &problem.pts, k);
        let q = crate::geometry::rotation_to_quat(&r);
        seeds.push(DVector::from_iterator(7, q.iter().chain(t.iter()).copied()));
    }

    let short = LmOptions {
        max_iters: SEED_ITERS,
        ..LmOptions::default()
    };
    let mut stage: Vec<(f64, usize, DVector<f64>)> = Vec::new();
    for (idx, s) in seeds.into_iter().enumerate() {
        if let Some((xs, rep)) = minimize(&problem, s, &short) {
            stage.push((rep.final_cost, idx, xs));
        }
    }
    if stage.is_empty() {
        return Err(Error::DegenerateConfiguration(
            "no pose seed places the points in front of the camera".into(),
        ));
    }
    stage.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // depth is weakly constrained: stop on step size, not on cost change
    let full = LmOptions {
        max_iters: 200,
        ftol: 0.0,
        ..LmOptions::default()
    };
    let mut best: Option<(f64, usize, DVector<f64>)> = None;
    for (_, idx, xs) in stage.into_iter().take(POLISHED) {
        if let Some((xf, rep)) = minimize(&problem, xs, &full) {
            let better = match &best {
                None => true,
                Some((c, i, _)) => rep.final_cost < *c || (rep.final_cost == *c && idx < *i),
            };
            if better {
                best = Some((rep.final_cost, idx, xf));
            }
        }
    }
    let (_, _, xb) = best.expect("polishing a feasible seed stays feasible");
    let pose = QuatPose::new(Vector4::new(xb[0], xb[1], xb[2], xb[3]), Vec3::new(xb[4], xb[5], xb[6]))?.canonical();
    // never return something worse than the supplied initialization
    if let Some(p0) = init {
        if let (Some(c0), Some(c1)) = (weighted_cost(p0, &problem.pts, k), weighted_cost(&pose, &problem.pts, k)) {
            if c0 < c1 {
                return Ok(p0.canonical());
            }
        }
    }
    Ok(pose)
}

pub(crate) fn check_observations(obs: &[KeypointObservation], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for o in obs {
        if o.index >= k {
            return Err(Error::DegenerateInput(format!("keypoint index {} out of range (K = {k})", o.index)));
        }
        if seen[o.index] {
            return Err(Error::DegenerateInput(format!("keypoint {} observed twice", o.index)));
        }
        seen[o.index] = true;
        if !(0.0..=1.0).contains(&o.w_cnn) {
            return Err(Error::DegenerateInput(format!(
                "keypoint {} confidence {} outside [0, 1]",
                o.index, o.w_cnn
            )));
        }
    }
    Ok(())
}

/// Per-keypoint reprojection errors (0 where there is no usable observation).
pub(crate) fn reprojection_errors(shape: &[Vec3], obs: &[KeypointObservation], pose: &QuatPose, k: &Intrinsics) -> Result<Vec<f64>> {
    let r = pose.rotation()?;
    let mut out = vec![0.0; shape.len()];
    for o in obs.iter().filter(|o| o.usable()) {
        let pc = r * shape[o.index] + pose.t;
        out[o.index] = if pc.z > 0.0 {
            (k.project_unchecked(&pc) - o.uv).norm()
        } else {
            f64::INFINITY
        };
    }
    Ok(out)
}

/// One IRLS weight step over the keypoints in `active`: errors are
/// normalized by `max(max_err, error_scale)` and fed to [`weight_update`].
pub(crate) fn update_weights(weights: &mut [f64], err: &[f64], w_vis: &[f64], active: &[usize], cfg: &IrlsConfig) {
    let max_err = active
        .iter()
        .map(|&i| err[i])
        .filter(|e| e.is_finite())
        .fold(0.0, f64::max);
    let scale = max_err.max(cfg.error_scale).max(1e-300);
    for &i in active {
        let e = (err[i] / scale).min(1.0);
        let arg = if cfg.literal_update { e } else { 1.0 - e };
        weights[i] = weight_update(weights[i], arg, w_vis[i], cfg.mu1, cfg.mu2, cfg.weight_floor);
    }
}

/// Robust pose of the prior's mean shape: initial weights from detector
/// confidence and visibility, one weighted PnP solve, then `max_iters`
/// rounds of weight update and re-solve.
///
/// Without `init`, the initial visibility is taken at the pose solved from
/// detector confidences alone.
pub fn irls_pose(
    prior: &ShapePrior,
    obs: &[KeypointObservation],
    k: &Intrinsics,
    cfg: &IrlsConfig,
    init: Option<&QuatPose>,
) -> Result<PoseResult> {
    cfg.validate()?;
    let shape = &prior.mean;
    let n = shape.len();
    check_observations(obs, n)?;
    let usable = obs.iter().filter(|o| o.usable()).count();
    if usable < 4 {
        return Err(Error::TooFewPoints {
            required: 4,
            actual: usable,
        });
    }
    // visibility at the initial pose; without one, at a confidence-only solve
    let w_vis0 = match init {
        Some(p) => visibility_prior(shape, prior.topology(), p, cfg.v_occ)?,
        None => {
            let mut w0 = vec![0.0; n];
            for o in obs.iter().filter(|o| o.usable()) {
                w0[o.index] = o.w_cnn.max(cfg.weight_floor);
            }
            let p0 = pnp_weighted(shape, obs, k, &w0, None)?;
            visibility_prior(shape, prior.topology(), &p0, cfg.v_occ)?
        }
    };
    let mut weights = vec![0.0; n];
    for o in obs.iter().filter(|o| o.usable()) {
        weights[o.index] = weight_init(o.w_cnn, w_vis0[o.index], cfg.mu0, cfg.weight_floor);
    }
    let mut pose = pnp_weighted(shape, obs, k, &weights, init)?;
    let mut history = vec![weights.clone()];
    for _ in 0..cfg.max_iters {
        let err = reprojection_errors(shape, obs, &pose, k)?;
        let w_vis = visibility_prior(shape, prior.topology(), &pose, cfg.v_occ)?;
        let active: Vec<usize> = obs.iter().filter(|o| o.usable()).map(|o| o.index).collect();
        update_weights(&mut weights, &err, &w_vis, &active, cfg);
        pose = pnp_weighted(shape, obs, k, &weights, Some(&pose))?;
        history.push(weights.clone());
    }
    let residuals = reprojection_errors(shape, obs, &pose, k)?;
    let final_cost = obs
        .iter()
        .filter(|o| o.usable())
        .map(|o| (weights[o.index] * residuals[o.index]).powi(2))
        .sum();
    Ok(PoseResult {
        pose,
        weights,
        residuals,
        iterations: cfg.max_iters,
        final_cost,
        weight_history: history,
    })
}
