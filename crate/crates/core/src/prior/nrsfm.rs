//! Prior learning by non-rigid structure from motion with a probabilistic
//! (EM-PPCA) shape model under scaled orthographic cameras.
//!
//! Each instance `m` is modeled as
//!
//! ```text
//! s_im = c_m R_m (S̄_i + V_i λ_m) + τ_m + δ_im,   λ_m ~ N(0, I),  δ ~ N(0, σ² I)
//! ```
//!
//! where `τ_m = c_m R_m t_m` is the image-plane image of the object-frame
//! translation. The E-step computes the Gaussian posterior of `λ_m` from the
//! visible keypoints only (missing ones are marginalized and then imputed at
//! their posterior-predictive mean). The M-step is blockwise coordinate
//! ascent on the expected complete-data log-likelihood: shape and basis in
//! closed form, then each camera by a monotone majorize-minimize iteration
//! on the Stiefel manifold, then `σ²` in closed form. Every block increases
//! the expected log-likelihood, so the observed-data likelihood never drops.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2};

use super::{extents, AnnotationSet, DimPriors, KeypointLayout, LatentCoeffs, ShapePrior};
use crate::error::{Error, Result};
use crate::geometry::{nearest_row_orthonormal, OrthoCam, Vec2, Vec3};
use crate::mesh::Plane;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tol: f64,
    /// Instances with fewer visible keypoints are rejected.
    pub min_visible: usize,
    /// Rescale the learned prior so the mean shape has this length (meters).
    /// Orthographic data carry no absolute scale.
    pub reference_length: Option<f64>,
    /// Rounds of low-rank imputation used to fill missing entries before
    /// the rigid factorization.
    pub init_imputation_rounds: usize,
    /// Iterations of the joint least-squares polish run after EM (0 disables).
    pub refine_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-6,
            min_visible: 4,
            reference_length: Some(3.9),
            init_imputation_rounds: 20,
            refine_iters: 100,
        }
    }
}

/// Per-instance result of the fit, in the canonical prior frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFit {
    pub id: String,
    pub camera: OrthoCam,
    pub coeffs: LatentCoeffs,
    /// `S̄ + Σ λ_j V_j` at the posterior mean.
    pub shape: Vec<Vec3>,
    /// Observed keypoints, with missing ones filled at the posterior-predictive mean.
    pub completed: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood at the start of every iteration, plus the final value.
    pub log_likelihood: Vec<f64>,
    /// `(instance id, visible keypoint count)` of instances left out of the fit.
    pub rejected: Vec<(String, usize)>,
    pub rank_deficient: bool,
    pub warnings: Vec<String>,
    /// Per-coordinate RMS reprojection error after the joint polish, pixels.
    pub refined_rms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct NrsfmFit {
    pub prior: ShapePrior,
    pub instances: Vec<InstanceFit>,
    pub report: FitReport,
}

#[derive(Debug, Clone)]
struct Cam {
    c: f64,
    r: Matrix2x3<f64>,
    tau: Vec2,
}

impl Cam {
    fn g(&self) -> Matrix2x3<f64> {
        self.r * self.c
    }
}

#[derive(Debug, Clone)]
struct Model {
    mean: Vec<Vec3>,
    /// 3K × N
    v: DMatrix<f64>,
    sigma2: f64,
}

impl Model {
    fn v_block(&self, i: usize) -> DMatrix<f64> {
        self.v.rows(3 * i, 3).into_owned()
    }

    /// Posterior-mean 3D keypoint.
    fn point(&self, i: usize, mu: &DVector<f64>) -> Vec3 {
        self.mean[i] + self.v.rows(3 * i, 3) * mu
    }
}

#[derive(Debug, Clone)]
struct Posterior {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    loglik: f64,
}

struct Obs<'a> {
    points: &'a [Option<Vec2>],
}

impl Obs<'_> {
    fn visible(&self) -> impl Iterator<Item = (usize, Vec2)> + '_ {
        self.points.iter().enumerate().filter_map(|(i, p)| p.map(|p| (i, p)))
    }
}

fn g_dyn(g: &Matrix2x3<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[g[(0, 0)], g[(0, 1)], g[(0, 2)], g[(1, 0)], g[(1, 1)], g[(1, 2)]])
}

fn e_step(model: &Model, cam: &Cam, obs: &Obs) -> Posterior {
    let n = model.v.ncols();
    let g = cam.g();
    let gd = g_dyn(&g);
    let s2 = model.sigma2;
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut atb = DVector::<f64>::zeros(n);
    let mut ee = 0.0;
    let mut count = 0usize;
    for (i, s) in obs.visible() {
        let a = &gd * model.v.rows(3 * i, 3);
        let e = s - g * model.mean[i] - cam.tau;
        ata += a.tr_mul(&a);
        atb += a.tr_mul(&DVector::from_column_slice(e.as_slice()));
        ee += e.norm_squared();
        count += 1;
    }
    let p = DMatrix::<f64>::identity(n, n) + ata / s2;
    let chol = p.clone().cholesky().expect("I + AᵀA/σ² is positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let sigma = chol.inverse();
    let mu = &sigma * &atb / s2;
    let quad = (ee - atb.dot(&mu)) / s2;
    let loglik = -0.5 * (2.0 * count as f64 * (2.0 * std::f64::consts::PI * s2).ln() + logdet + quad);
    Posterior { mu, sigma, loglik }
}

/// Closed-form update of `[S̄_i, V_i]` for every keypoint.
fn update_shape(model: &mut Model, cams: &[Cam], posts: &[Posterior], obs: &[Obs]) {
    let k = model.mean.len();
    let n = model.v.ncols();
    let dim = 3 * (n + 1);
    let mut h = vec![DMatrix::<f64>::zeros(dim, dim); k];
    let mut rhs = vec![DVector::<f64>::zeros(dim); k];
    for ((cam, post), o) in cams.iter().zip(posts).zip(obs) {
        let g = cam.g();
        let gtg: Matrix3<f64> = g.transpose() * g;
        // E[z zᵀ] with z = [1; λ]
        let mut z = DMatrix::<f64>::zeros(n + 1, n + 1);
        z[(0, 0)] = 1.0;
        for a in 0..n {
            z[(0, a + 1)] = post.mu[a];
            z[(a + 1, 0)] = post.mu[a];
            for b in 0..n {
                z[(a + 1, b + 1)] = post.sigma[(a, b)] + post.mu[a] * post.mu[b];
            }
        }
        for (i, s) in o.visible() {
            let hi = &mut h[i];
            for a in 0..=n {
                for b in 0..=n {
                    let zab = z[(a, b)];
                    if zab == 0.0 {
                        continue;
                    }
                    for p in 0..3 {
                        for q in 0..3 {
                            hi[(3 * a + p, 3 * b + q)] += zab * gtg[(p, q)];
                        }
                    }
                }
            }
            let gs = g.transpose() * (s - cam.tau);
            let ri = &mut rhs[i];
            for a in 0..=n {
                let ez = if a == 0 { 1.0 } else { post.mu[a - 1] };
                for p in 0..3 {
                    ri[3 * a + p] += gs[p] * ez;
                }
            }
        }
    }
    for i in 0..k {
        let sol = match h[i].clone().cholesky() {
            Some(ch) => ch.solve(&rhs[i]),
            None => {
                let svd = h[i].clone().svd(true, true);
                match svd.solve(&rhs[i], 1e-12) {
                    Ok(x) => x,
                    Err(_) => continue,
                }
            }
        };
        model.mean[i] = Vec3::new(sol[0], sol[1], sol[2]);
        for a in 0..n {
            for p in 0..3 {
                model.v[(3 * i + p, a)] = sol[3 * (a + 1) + p];
            }
        }
    }
}

/// Expected centered second moments for the camera update of one instance.
struct CamStats {
    c_xx: Matrix3<f64>,
    d_sx: Matrix2x3<f64>,
    s_bar: Vec2,
    x_bar: Vec3,
}

fn cam_stats(model: &Model, post: &Posterior, obs: &Obs) -> Option<CamStats> {
    let mut n = 0.0;
    let mut s_bar = Vec2::zeros();
    let mut x_bar = Vec3::zeros();
    let mut exx = Matrix3::zeros();
    let mut pts = Vec::new();
    for (i, s) in obs.visible() {
        let x = model.point(i, &post.mu);
        let vi = model.v_block(i);
        let cov = &vi * &post.sigma * vi.transpose();
        exx += x * x.transpose() + Matrix3::from_iterator(cov.iter().copied());
        s_bar += s;
        x_bar += x;
        n += 1.0;
        pts.push((s, x));
    }
    if n < 1.0 {
        return None;
    }
    s_bar /= n;
    x_bar /= n;
    let c_xx = exx - x_bar * x_bar.transpose() * n;
    let mut d_sx = Matrix2x3::zeros();
    for (s, x) in pts {
        d_sx += (s - s_bar) * x.transpose();
    }
    Some(CamStats { c_xx, d_sx, s_bar, x_bar })
}

/// Profile objective over `G = cR` after eliminating `τ`.
fn cam_objective(c: f64, r: &Matrix2x3<f64>, st: &CamStats) -> f64 {
    c * c * (r * st.c_xx * r.transpose()).trace() - 2.0 * c * (r * st.d_sx.transpose()).trace()
}

fn best_scale(r: &Matrix2x3<f64>, st: &CamStats) -> Option<f64> {
    let den = (r * st.c_xx * r.transpose()).trace();
    (den > 0.0).then(|| (r * st.d_sx.transpose()).trace() / den)
}

fn update_camera(cam: &mut Cam, st: &CamStats) {
    let mut c = cam.c;
    let mut r = cam.r;
    let mut f = cam_objective(c, &r, st);

    // projection of the unconstrained minimizer, kept only if it helps
    if let Some(inv) = st.c_xx.try_inverse() {
        let g_free = st.d_sx * inv;
        if g_free.iter().all(|v| v.is_finite()) && g_free.norm() > 0.0 {
            let r_try = nearest_row_orthonormal(&g_free);
            if let Some(c_try) = best_scale(&r_try, st) {
                let (c_try, r_try) = if c_try < 0.0 { (-c_try, -r_try) } else { (c_try, r_try) };
                let f_try = cam_objective(c_try, &r_try, st);
                if c_try > 0.0 && f_try < f {
                    c = c_try;
                    r = r_try;
                    f = f_try;
                }
            }
        }
    }

    // majorize-minimize on the row-orthonormal manifold
    let lmax = st.c_xx.symmetric_eigenvalues().max();
    let shifted = st.c_xx - Matrix3::identity() * lmax;
    for _ in 0..25 {
        let m = st.d_sx * c - r * shifted * (c * c);
        if m.norm() == 0.0 {
            break;
        }
        let r_new = nearest_row_orthonormal(&m);
        let mut c_new = best_scale(&r_new, st).unwrap_or(c);
        let mut r_new = r_new;
        if c_new < 0.0 {
            c_new = -c_new;
            r_new = -r_new;
        }
        if !(c_new > 0.0) {
            break;
        }
        let f_new = cam_objective(c_new, &r_new, st);
        if !(f_new < f) {
            break;
        }
        let gain = (f - f_new) / f.abs().max(1e-300);
        c = c_new;
        r = r_new;
        f = f_new;
        if gain < 1e-12 {
            break;
        }
    }
    cam.c = c;
    cam.r = r;
    cam.tau = st.s_bar - r * st.x_bar * c;
}

fn expected_sq_residual(model: &Model, cam: &Cam, post: &Posterior, obs: &Obs) -> (f64, usize) {
    let g = cam.g();
    let gd = g_dyn(&g);
    let mut sum = 0.0;
    let mut count = 0;
    for (i, s) in obs.visible() {
        let x = model.point(i, &post.mu);
        let e = s - g * x - cam.tau;
        let gv = &gd * model.v.rows(3 * i, 3);
        sum += e.norm_squared() + (&gv * &post.sigma * gv.transpose()).trace();
        count += 1;
    }
    (sum, count)
}

fn sigma_floor(obs: &[Obs]) -> f64 {
    let mut sq = 0.0;
    let mut n = 0.0;
    for o in obs {
        let vis: Vec<Vec2> = o.visible().map(|(_, p)| p).collect();
        let c = vis.iter().sum::<Vec2>() / vis.len() as f64;
        for p in &vis {
            sq += (p - c).norm_squared();
            n += 2.0;
        }
    }
    (sq / n).max(1e-300) * 1e-14
}

/// Rank-3 factorization initialization (rigid shape plus residual modes).
fn initialize(obs: &[Obs], k: usize, n_basis: usize, cfg: &EmConfig, report: &mut FitReport) -> (Model, Vec<Cam>) {
    let m = obs.len();
    let mut w = DMatrix::<f64>::zeros(2 * m, k);
    let mut mask = vec![vec![false; k]; m];
    let mut taus = Vec::with_capacity(m);
    for (mi, o) in obs.iter().enumerate() {
        let vis: Vec<(usize, Vec2)> = o.visible().collect();
        let c = vis.iter().map(|(_, p)| p).sum::<Vec2>() / vis.len() as f64;
        taus.push(c);
        for (i, p) in vis {
            mask[mi][i] = true;
            w[(2 * mi, i)] = p.x - c.x;
            w[(2 * mi + 1, i)] = p.y - c.y;
        }
    }
    // fill missing entries with the mean of the same coordinate over instances
    for i in 0..k {
        for parity in 0..2 {
            let vals: Vec<f64> = (0..m).filter(|&mi| mask[mi][i]).map(|mi| w[(2 * mi + parity, i)]).collect();
            let fill = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            for mi in 0..m {
                if !mask[mi][i] {
                    w[(2 * mi + parity, i)] = fill;
                }
            }
        }
    }
    let any_missing = mask.iter().flatten().any(|v| !v);
    let rank = 3.min(2 * m).min(k);
    let low_rank = |w: &DMatrix<f64>, r: usize| {
        let svd = w.clone().svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let idx: Vec<usize> = order.into_iter().take(r).collect();
        let sv: Vec<f64> = idx.iter().map(|&j| svd.singular_values[j]).collect();
        let mut mcam = DMatrix::zeros(w.nrows(), r);
        let mut shape = DMatrix::zeros(r, w.ncols());
        for (c, &j) in idx.iter().enumerate() {
            let s = sv[c].sqrt();
            mcam.set_column(c, &(u.column(j) * s));
            shape.set_row(c, &(vt.row(j) * s));
        }
        (mcam, shape, sv)
    };
    if any_missing {
        let r = (rank + n_basis).min(2 * m).min(k);
        for _ in 0..cfg.init_imputation_rounds {
            let (mc, sh, _) = low_rank(&w, r);
            let rec = &mc * &sh;
            for mi in 0..m {
                for i in 0..k {
                    if !mask[mi][i] {
                        w[(2 * mi, i)] = rec[(2 * mi, i)];
                        w[(2 * mi + 1, i)] = rec[(2 * mi + 1, i)];
                    }
                }
            }
        }
    }
    let (mhat, shat, sv) = low_rank(&w, rank);
    if sv.len() >= 3 && sv[2] <= 1e-9 * sv[0].max(1e-300) {
        report.rank_deficient = true;
        report
            .warnings
            .push("measurement matrix has rank < 3; viewpoints may be degenerate".into());
    }

    // metric upgrade: find symmetric L = QQᵀ making camera rows orthogonal, equal norm
    let sym = |a: &DVector<f64>, b: &DVector<f64>| -> [f64; 6] {
        [
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[1],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
        ]
    };
    let mut hmat = DMatrix::<f64>::zeros(2 * m, 6);
    let mut gvec = DVector::<f64>::zeros(6);
    for mi in 0..m {
        let a: DVector<f64> = mhat.row(2 * mi).transpose();
        let b: DVector<f64> = mhat.row(2 * mi + 1).transpose();
        let aa = sym(&a, &a);
        let bb = sym(&b, &b);
        let ab = sym(&a, &b);
        for j in 0..6 {
            hmat[(2 * mi, j)] = aa[j] - bb[j];
            hmat[(2 * mi + 1, j)] = ab[j];
            gvec[j] += aa[j] + bb[j];
        }
    }
    // null direction of the constraints, scaled so camera rows have unit norm on average
    let hth = hmat.tr_mul(&hmat);
    let eig = hth.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let l_vec = Some(eig.eigenvectors.column(imin).into_owned())
        .map(|y| {
            let den = gvec.dot(&y);
            y * (2.0 * m as f64 / den)
        })
        .filter(|l| l.iter().all(|v| v.is_finite()));
    let q = match l_vec {
        Some(l) => {
            let lm = Matrix3::new(l[0], l[1], l[2], l[1], l[3], l[4], l[2], l[4], l[5]);
            let eig = lm.symmetric_eigen();
            let top = eig.eigenvalues.max().max(1e-300);
            let mut q = Matrix3::zeros();
            for j in 0..3 {
                let ev = eig.eigenvalues[j].max(1e-6 * top);
                q.set_column(j, &(eig.eigenvectors.column(j) * ev.sqrt()));
            }
            q
        }
        None => {
            report.warnings.push("metric upgrade failed; using affine factorization".into());
            Matrix3::identity()
        }
    };
    let q_inv = q.try_inverse().unwrap_or_else(Matrix3::identity);
    let q_dyn = DMatrix::from_iterator(3, 3, q.iter().copied());
    let qi_dyn = DMatrix::from_iterator(3, 3, q_inv.iter().copied());
    let mcam = &mhat * &q_dyn;
    let shape = &qi_dyn * &shat;
    let mean: Vec<Vec3> = (0..k).map(|i| Vec3::new(shape[(0, i)], shape[(1, i)], shape[(2, i)])).collect();

    let mut cams = Vec::with_capacity(m);
    for mi in 0..m {
        let g = Matrix2x3::new(
            mcam[(2 * mi, 0)],
            mcam[(2 * mi, 1)],
            mcam[(2 * mi, 2)],
            mcam[(2 * mi + 1, 0)],
            mcam[(2 * mi + 1, 1)],
            mcam[(2 * mi + 1, 2)],
        );
        let c = 0.5 * (g.row(0).norm() + g.row(1).norm());
        let r = if c > 0.0 {
            nearest_row_orthonormal(&(g / c))
        } else {
            Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
        };
        cams.push(Cam {
            c: c.max(1e-12),
            r,
            tau: taus[mi],
        });
    }

    // view-direction spread check
    let dirs: Vec<Vec3> = cams
        .iter()
        .map(|c| {
            let r1 = Vec3::new(c.r[(0, 0)], c.r[(0, 1)], c.r[(0, 2)]);
            let r2 = Vec3::new(c.r[(1, 0)], c.r[(1, 1)], c.r[(1, 2)]);
            r1.cross(&r2)
        })
        .collect();
    let spread = dirs
        .iter()
        .map(|d| d.dot(&dirs[0]).abs().clamp(0.0, 1.0).acos())
        .fold(0.0f64, f64::max);
    if m > 1 && spread < 1f64.to_radians() {
        report.rank_deficient = true;
        report
            .warnings
            .push("all instances share nearly the same viewpoint; depth is unobservable".into());
    }

    // basis from residuals lifted through the camera pseudo-inverse
    let mut resid = DMatrix::<f64>::zeros(3 * k, m);
    let mut sq = 0.0;
    let mut cnt = 0.0;
    for (mi, cam) in cams.iter().enumerate() {
        let g = cam.g();
        let ggt: Matrix2<f64> = g * g.transpose();
        let pinv = ggt.try_inverse().map(|inv| g.transpose() * inv);
        for i in 0..k {
            let obs_i = Vector2::new(w[(2 * mi, i)], w[(2 * mi + 1, i)]);
            let r = obs_i - g * mean[i];
            if mask[mi][i] {
                sq += r.norm_squared();
                cnt += 2.0;
            }
            if let Some(p) = &pinv {
                let d = p * r;
                for c in 0..3 {
                    resid[(3 * i + c, mi)] = d[c];
                }
            }
        }
    }
    let centered = {
        let mut c = resid.clone();
        for row in 0..c.nrows() {
            let mu = c.row(row).mean();
            for col in 0..c.ncols() {
                c[(row, col)] -= mu;
            }
        }
        c
    };
    let scale2 = mean.iter().map(|p| p.norm_squared()).sum::<f64>() / k as f64;
    let svd = centered.svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut v = DMatrix::<f64>::zeros(3 * k, n_basis);
    for j in 0..n_basis {
        let (dir, var) = if j < order.len() {
            let idx = order[j];
            let var = svd.singular_values[idx].powi(2) / m.max(1) as f64;
            (u.column(idx).into_owned(), var)
        } else {
            let mut e = DVector::zeros(3 * k);
            e[j % (3 * k)] = 1.0;
            (e, 0.0)
        };
        let sd = var.max(1e-6 * scale2).sqrt();
        v.set_column(j, &(dir * sd));
    }
    let floor = sigma_floor(obs);
    let sigma2 = if cnt > 0.0 { (sq / cnt).max(floor).max(1e-8 * scale2.max(1e-300)) } else { 1.0 };
    debug!("nrsfm init: sigma2={sigma2:.3e}, singular values {sv:?}");
    (Model { mean, v, sigma2 }, cams)
}

/// Weight of the low-rank penalty relative to the image-coordinate variance.
const RIDGE: f64 = 1e-6;

/// Joint Levenberg–Marquardt over cameras, mean, basis and coefficients.
///
/// EM moves the latent coefficients and the parameters in alternation and
/// slows to a crawl once the noise variance is small; this polish solves the
/// problem `Σ‖s − cR(S̄ + Vλ) − τ‖² + α(Σ_m‖λ_m‖² + M‖V‖²)` jointly. The
/// small balanced penalty acts as a nuclear norm on `VΛ`, so modes the data
/// do not need shrink to zero instead of absorbing per-instance rotations.
/// Per-instance
/// blocks are eliminated by a Schur complement, leaving a system over the
/// per-keypoint `[S̄_i, V_i]` blocks. Returns the final RMS residual.
fn refine(model: &mut Model, cams: &mut [Cam], coeffs: &mut [DVector<f64>], obs: &[Obs], iters: usize) -> f64 {
    let k = model.mean.len();
    let n = model.v.ncols();
    let bs = 3 * (n + 1);
    let ds = 6 + n;
    let n_vis: usize = obs.iter().map(|o| o.visible().count()).sum();

    let mut b: Vec<DMatrix<f64>> = (0..k)
        .map(|i| {
            let mut m = DMatrix::zeros(3, n + 1);
            m.set_column(0, &nalgebra::DVector::from_column_slice(model.mean[i].as_slice()));
            m.columns_mut(1, n).copy_from(&model.v.rows(3 * i, 3));
            m
        })
        .collect();
    let mut rots: Vec<Matrix3<f64>> = cams
        .iter()
        .map(|c| {
            let r1 = c.r.row(0).transpose();
            let r2 = c.r.row(1).transpose();
            Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r1.cross(&r2).transpose()])
        })
        .collect();
    let mut scales: Vec<f64> = cams.iter().map(|c| c.c).collect();
    let mut taus: Vec<Vec2> = cams.iter().map(|c| c.tau).collect();
    let mut lams: Vec<DVector<f64>> = coeffs.to_vec();
    let spread = {
        let mut sq = 0.0;
        let mut cnt = 0.0;
        for o in obs {
            let vis: Vec<Vec2> = o.visible().map(|(_, p)| p).collect();
            let c = vis.iter().sum::<Vec2>() / vis.len() as f64;
            sq += vis.iter().map(|p| (p - c).norm_squared()).sum::<f64>();
            cnt += vis.len() as f64;
        }
        sq / cnt.max(1.0)
    };
    let rho2 = RIDGE * spread;
    let rho2_v = rho2 * obs.len() as f64;

    let point = |b: &[DMatrix<f64>], i: usize, lam: &DVector<f64>| -> Vec3 {
        let x = b[i].column(0) + b[i].columns(1, n) * lam;
        Vec3::new(x[0], x[1], x[2])
    };
    let cost = |b: &[DMatrix<f64>], rots: &[Matrix3<f64>], scales: &[f64], taus: &[Vec2], lams: &[DVector<f64>]| {
        let mut data = 0.0;
        let mut reg: f64 = b.iter().map(|bi| rho2_v * bi.columns(1, n).norm_squared()).sum();
        for (m, o) in obs.iter().enumerate() {
            let g = rots[m].fixed_rows::<2>(0) * scales[m];
            for (i, s) in o.visible() {
                data += (g * point(b, i, &lams[m]) + taus[m] - s).norm_squared();
            }
            reg += rho2 * lams[m].norm_squared();
        }
        (data + reg, data)
    };

    let (mut f, mut data) = cost(&b, &rots, &scales, &taus, &lams);
    let mut mu = 1e-4;
    for _ in 0..iters {
        // normal equations
        let mut u_blocks = vec![DMatrix::<f64>::zeros(bs, bs); k];
        let mut gu = vec![DVector::<f64>::zeros(bs); k];
        let mut v_blocks = Vec::with_capacity(obs.len());
        let mut gv = Vec::with_capacity(obs.len());
        let mut w_blocks: Vec<Vec<(usize, DMatrix<f64>)>> = Vec::with_capacity(obs.len());
        for (m, o) in obs.iter().enumerate() {
            let r3 = rots[m];
            let p = r3.fixed_rows::<2>(0).into_owned();
            let c = scales[m];
            let g = p * c;
            let lam = &lams[m];
            let mut vm = DMatrix::<f64>::zeros(ds, ds);
            let mut gm = DVector::<f64>::zeros(ds);
            let mut wm = Vec::new();
            for (i, s) in o.visible() {
                let x = point(&b, i, lam);
                let res = g * x + taus[m] - s;
                // instance Jacobian: [ω(3), c, τ(2), λ(n)]
                let mut ji = DMatrix::<f64>::zeros(2, ds);
                let jw = -(g * x.cross_matrix());
                ji.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
                let px = p * x;
                ji[(0, 3)] = px[0];
                ji[(1, 3)] = px[1];
                ji[(0, 4)] = 1.0;
                ji[(1, 5)] = 1.0;
                let gd = g_dyn(&g);
                let gv_i = &gd * b[i].columns(1, n);
                ji.columns_mut(6, n).copy_from(&gv_i);
                // shared Jacobian: d r / d B_i[p, a] = G[:, p] z[a]
                let mut jb = DMatrix::<f64>::zeros(2, bs);
                for a in 0..=n {
                    let za = if a == 0 { 1.0 } else { lam[a - 1] };
                    for q in 0..3 {
                        jb[(0, 3 * a + q)] = g[(0, q)] * za;
                        jb[(1, 3 * a + q)] = g[(1, q)] * za;
                    }
                }
                let rv = DVector::from_column_slice(res.as_slice());
                vm += ji.tr_mul(&ji);
                gm += ji.tr_mul(&rv);
                u_blocks[i] += jb.tr_mul(&jb);
                gu[i] += jb.tr_mul(&rv);
                wm.push((i, jb.tr_mul(&ji)));
            }
            for j in 0..n {
                vm[(6 + j, 6 + j)] += rho2;
                gm[6 + j] += rho2 * lam[j];
            }
            v_blocks.push(vm);
            gv.push(gm);
            w_blocks.push(wm);
        }
        for i in 0..k {
            for d in 3..bs {
                u_blocks[i][(d, d)] += rho2_v;
                gu[i][d] += rho2_v * b[i][(d % 3, d / 3)];
            }
        }
        let grad_norm = gu.iter().map(|g| g.amax()).chain(gv.iter().map(|g| g.amax())).fold(0.0, f64::max);
        if grad_norm < 1e-14 * f.max(1e-300) {
            break;
        }

        let mut accepted = false;
        for _ in 0..30 {
            let mut vinv = Vec::with_capacity(obs.len());
            let mut ok = true;
            for vm in &v_blocks {
                let mut a = vm.clone();
                for d in 0..ds {
                    a[(d, d)] += mu * vm[(d, d)].max(1e-12);
                }
                match a.cholesky() {
                    Some(ch) => vinv.push(ch.inverse()),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                mu *= 10.0;
                continue;
            }
            let dim = k * bs;
            let mut s_mat = DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::<f64>::zeros(dim);
            for i in 0..k {
                let mut a = u_blocks[i].clone();
                for d in 0..bs {
                    a[(d, d)] += mu * u_blocks[i][(d, d)].max(1e-12);
                }
                s_mat.view_mut((i * bs, i * bs), (bs, bs)).copy_from(&a);
                rhs.rows_mut(i * bs, bs).copy_from(&(-&gu[i]));
            }
            for (m, wm) in w_blocks.iter().enumerate() {
                let vi = &vinv[m];
                let wv: Vec<(usize, DMatrix<f64>)> = wm.iter().map(|(i, w)| (*i, w * vi)).collect();
                for (i, wvi) in &wv {
                    let mut r = rhs.rows_mut(i * bs, bs);
                    r += wvi * &gv[m];
                    for (j, wj) in wm {
                        let mut blk = s_mat.view_mut((i * bs, j * bs), (bs, bs));
                        blk -= wvi * wj.transpose();
                    }
                }
            }
            let Some(ch) = s_mat.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let du = ch.solve(&rhs);
            let mut nb = b.clone();
            for i in 0..k {
                let d = du.rows(i * bs, bs);
                for a in 0..=n {
                    for q in 0..3 {
                        nb[i][(q, a)] += d[3 * a + q];
                    }
                }
            }
            let mut nrots = rots.clone();
            let mut nscales = scales.clone();
            let mut ntaus = taus.clone();
            let mut nlams = lams.clone();
            let mut valid = true;
            for (m, wm) in w_blocks.iter().enumerate() {
                let mut r = -&gv[m];
                for (i, w) in wm {
                    r -= w.tr_mul(&du.rows(i * bs, bs));
                }
                let dv = &vinv[m] * r;
                let omega = Vec3::new(dv[0], dv[1], dv[2]);
                nrots[m] = rots[m] * nalgebra::Rotation3::new(omega).into_inner();
                nscales[m] = scales[m] + dv[3];
                if !(nscales[m] > 0.0) {
                    valid = false;
                }
                ntaus[m] = taus[m] + Vec2::new(dv[4], dv[5]);
                nlams[m] = &lams[m] + dv.rows(6, n);
            }
            if valid {
                let (nf, nd) = cost(&nb, &nrots, &nscales, &ntaus, &nlams);
                if nf < f {
                    let rel = (f - nf) / f.max(1e-300);
                    b = nb;
                    rots = nrots;
                    scales = nscales;
                    taus = ntaus;
                    lams = nlams;
                    f = nf;
                    data = nd;
                    mu = (mu / 3.0).max(1e-12);
                    accepted = rel > 1e-12;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }

    for i in 0..k {
        model.mean[i] = Vec3::new(b[i][(0, 0)], b[i][(1, 0)], b[i][(2, 0)]);
        model.v.rows_mut(3 * i, 3).copy_from(&b[i].columns(1, n));
    }
    for (m, cam) in cams.iter_mut().enumerate() {
        cam.r = rots[m].fixed_rows::<2>(0).into_owned();
        cam.c = scales[m];
        cam.tau = taus[m];
    }
    coeffs.clone_from_slice(&lams);
    (data / (2.0 * n_vis.max(1) as f64)).sqrt()
}

/// Learns a shape prior from 2D annotations.
///
/// `layout` supplies the category metadata (faces, symmetry pairs, front
/// keypoints) used to orient the canonical frame; it is not learned.
pub fn nrsfm_fit(data: &AnnotationSet, layout: &KeypointLayout, basis_size: usize, cfg: &EmConfig) -> Result<NrsfmFit> {
    data.validate()?;
    layout.validate()?;
    if data.keypoint_names != layout.names {
        return Err(Error::Schema("annotation keypoint names differ from the layout".into()));
    }
    let k = layout.len();
    let mut report = FitReport::default();
    let mut kept = Vec::new();
    for inst in &data.instances {
        let vis = inst.visible_count();
        if vis < cfg.min_visible.max(1) {
            report.rejected.push((inst.id.clone(), vis));
        } else {
            kept.push(inst);
        }
    }
    if !report.rejected.is_empty() {
        warn!("{} instance(s) rejected for too few visible keypoints", report.rejected.len());
    }
    let m = kept.len();
    if m < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 usable instances, got {m}")));
    }
    let max_n = (3 * k).min(m) - 1;
    if basis_size < 1 || basis_size > max_n {
        return Err(Error::InvalidConfig(format!(
            "basis size must be in 1..={max_n} for {m} instances of {k} keypoints, got {basis_size}"
        )));
    }
    let obs: Vec<Obs> = kept.iter().map(|inst| Obs { points: &inst.points }).collect();

    let (mut model, mut cams) = initialize(&obs, k, basis_size, cfg, &mut report);
    let floor = sigma_floor(&obs);

    let mut prev: Option<f64> = None;
    let mut posts: Vec<Posterior> = Vec::new();
    for it in 0..cfg.max_iters {
        posts = cams.iter().zip(&obs).map(|(c, o)| e_step(&model, c, o)).collect();
        let ll: f64 = posts.iter().map(|p| p.loglik).sum();
        report.log_likelihood.push(ll);
        report.iterations = it;
        if let Some(p) = prev {
            if ((ll - p) / p.abs().max(1e-300)).abs() < cfg.tol {
                report.converged = true;
                break;
            }
        }
        prev = Some(ll);

        update_shape(&mut model, &cams, &posts, &obs);
        for ((cam, post), o) in cams.iter_mut().zip(&posts).zip(&obs) {
            if let Some(st) = cam_stats(&model, post, o) {
                update_camera(cam, &st);
            }
        }
        let (mut sum, mut cnt) = (0.0, 0usize);
        for ((cam, post), o) in cams.iter().zip(&posts).zip(&obs) {
            let (s, c) = expected_sq_residual(&model, cam, post, o);
            sum += s;
            cnt += c;
        }
        model.sigma2 = (sum / (2.0 * cnt as f64)).max(floor);
    }
    if !report.converged {
        posts = cams.iter().zip(&obs).map(|(c, o)| e_step(&model, c, o)).collect();
        report.log_likelihood.push(posts.iter().map(|p| p.loglik).sum());
        report.iterations = cfg.max_iters;
    }
    debug!(
        "nrsfm: {} iterations, converged={}, sigma2={:.3e}",
        report.iterations, report.converged, model.sigma2
    );

    let mut coeffs: Vec<DVector<f64>> = posts.iter().map(|p| p.mu.clone()).collect();
    if cfg.refine_iters > 0 {
        let rms = refine(&mut model, &mut cams, &mut coeffs, &obs, cfg.refine_iters);
        model.sigma2 = (rms * rms).max(floor);
        report.refined_rms = Some(rms);
    }
    let prior = finalize(&mut model, &mut cams, &mut coeffs, layout, cfg)?;
    let mut instances = Vec::with_capacity(m);
    for (mi, inst) in kept.iter().enumerate() {
        let cam = &cams[mi];
        let shape = super::unflatten(&(prior.mean_flat() + &prior.basis * &coeffs[mi]));
        let g = cam.g();
        let completed = inst
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| p.unwrap_or_else(|| g * shape[i] + cam.tau))
            .collect();
        let t = cam.r.transpose() * cam.tau / cam.c;
        instances.push(InstanceFit {
            id: inst.id.clone(),
            camera: OrthoCam {
                r: cam.r,
                t,
                c: cam.c,
            },
            coeffs: LatentCoeffs(coeffs[mi].clone()),
            shape,
            completed,
        });
    }
    let mut prior = prior;
    let n_inst = instances.len() as f64;
    let (mut l, mut w, mut h) = (0.0, 0.0, 0.0);
    for inst in &instances {
        let (a, b, c) = extents(&inst.shape);
        l += a;
        w += b;
        h += c;
    }
    prior.dim_priors = DimPriors {
        length: l / n_inst,
        width: w / n_inst,
        height: h / n_inst,
    };
    Ok(NrsfmFit {
        prior,
        instances,
        report,
    })
}

/// Removes gauge freedoms: centers the mean, strips rigid translation from
/// the basis, orthonormalizes it, and rotates/scales into the canonical frame.
fn finalize(
    model: &mut Model,
    cams: &mut [Cam],
    coeffs: &mut [DVector<f64>],
    layout: &KeypointLayout,
    cfg: &EmConfig,
) -> Result<ShapePrior> {
    let k = model.mean.len();
    let n = model.v.ncols();

    let centroid = model.mean.iter().sum::<Vec3>() / k as f64;
    for p in &mut model.mean {
        *p -= centroid;
    }
    for cam in cams.iter_mut() {
        cam.tau += cam.g() * centroid;
    }
    let mut shifts = Vec::with_capacity(n);
    for j in 0..n {
        let mut u = Vec3::zeros();
        for i in 0..k {
            u += Vec3::new(model.v[(3 * i, j)], model.v[(3 * i + 1, j)], model.v[(3 * i + 2, j)]);
        }
        u /= k as f64;
        for i in 0..k {
            for c in 0..3 {
                model.v[(3 * i + c, j)] -= u[c];
            }
        }
        shifts.push(u);
    }
    for (cam, mu) in cams.iter_mut().zip(coeffs.iter()) {
        let mut u = Vec3::zeros();
        for j in 0..n {
            u += shifts[j] * mu[j];
        }
        cam.tau += cam.g() * u;
    }

    // Per-instance scale is shared between c_m and the shape: any rescaling
    // s_m = 1/ψ(S_m) with ψ linear keeps an exact rank-N fit. Fix the gauge so
    // deformations carry no component along the mean; cameras absorb s_m.
    let mean_flat = super::flatten(&model.mean);
    let mean_sq = mean_flat.norm_squared();
    let shapes: Vec<DVector<f64>> = coeffs.iter().map(|mu| &mean_flat + &model.v * mu).collect();
    let ratios: Vec<f64> = shapes.iter().map(|s| s.dot(&mean_flat) / mean_sq.max(1e-300)).collect();
    let scales: Vec<f64> = if mean_sq > 0.0 && ratios.iter().all(|&a| a > 0.1) {
        ratios.iter().map(|a| 1.0 / a).collect()
    } else {
        warn!("shape scales are ill-conditioned; skipping scale normalization");
        vec![1.0; shapes.len()]
    };
    let shapes: Vec<DVector<f64>> = shapes.iter().zip(&scales).map(|(s, &f)| s * f).collect();
    for (cam, &f) in cams.iter_mut().zip(&scales) {
        cam.c /= f;
    }
    let m = shapes.len() as f64;
    let center = shapes.iter().fold(DVector::zeros(3 * k), |acc, s| acc + s) / m;
    let mut cov = DMatrix::<f64>::zeros(3 * k, 3 * k);
    for s in &shapes {
        let d = s - &center;
        cov += &d * d.transpose() / m;
    }
    // push rigid translations to the bottom of the spectrum
    let push = 1.0 + cov.trace();
    for c in 0..3 {
        let t = DVector::from_fn(3 * k, |r, _| if r % 3 == c { 1.0 / (k as f64).sqrt() } else { 0.0 });
        cov -= &t * t.transpose() * push;
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..3 * k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::<f64>::zeros(3 * k, n);
    let mut eigenvalues = vec![0.0; n];
    for (j, &idx) in order.iter().take(n).enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(idx));
        eigenvalues[j] = eig.eigenvalues[idx].max(0.0);
    }
    for (mu, s) in coeffs.iter_mut().zip(&shapes) {
        *mu = basis.tr_mul(&(s - &center));
    }
    model.mean = super::unflatten(&center);

    // canonical frame
    let mean = &model.mean;
    let all_c = mean.iter().sum::<Vec3>() / k as f64;
    let mut x_axis = layout
        .symmetry_pairs
        .iter()
        .map(|&(r, l)| mean[r] - mean[l])
        .sum::<Vec3>();
    if x_axis.norm() < 1e-12 {
        x_axis = Vec3::x();
    }
    x_axis.normalize_mut();
    let ground: Vec<usize> = {
        let mut g: Vec<usize> = layout
            .topology
            .faces()
            .iter()
            .filter(|f| f.ground_parallel)
            .flat_map(|f| f.vertices)
            .collect();
        g.sort_unstable();
        g.dedup();
        g
    };
    let mut y_axis = if ground.len() >= 3 {
        let pts: Vec<Vec3> = ground.iter().map(|&i| mean[i]).collect();
        let n = Plane::fit(&pts)?.n;
        n - x_axis * n.dot(&x_axis)
    } else {
        // least-spread direction orthogonal to the medial normal
        let mut cov = Matrix3::zeros();
        for p in mean {
            let q = (p - all_c) - x_axis * (p - all_c).dot(&x_axis);
            cov += q * q.transpose();
        }
        let e = cov.symmetric_eigen();
        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for j in 0..3 {
            let col: Vec3 = e.eigenvectors.column(j).into_owned();
            if col.dot(&x_axis).abs() < 0.5 && e.eigenvalues[j] < best_val {
                best = j;
                best_val = e.eigenvalues[j];
            }
        }
        e.eigenvectors.column(best).into_owned()
    };
    if y_axis.norm() < 1e-12 {
        y_axis = x_axis.cross(&Vec3::z());
    }
    y_axis.normalize_mut();
    if !ground.is_empty() {
        let gc = ground.iter().map(|&i| mean[i]).sum::<Vec3>() / ground.len() as f64;
        if (gc - all_c).dot(&y_axis) < 0.0 {
            y_axis = -y_axis;
        }
    }
    let mut z_axis = x_axis.cross(&y_axis);
    if !layout.front.is_empty() {
        let fc = layout.front.iter().map(|&i| mean[i]).sum::<Vec3>() / layout.front.len() as f64;
        if (fc - all_c).dot(&z_axis) < 0.0 {
            z_axis = -z_axis;
        }
    }
    let p = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
    let rotated: Vec<Vec3> = mean.iter().map(|x| p * x).collect();
    let (len, _, _) = extents(&rotated);
    let s = match cfg.reference_length {
        Some(target) if len > 0.0 => target / len,
        _ => 1.0,
    };
    let mean_c: Vec<Vec3> = rotated.iter().map(|x| x * s).collect();
    let mut basis_c = basis.clone();
    for j in 0..n {
        for i in 0..k {
            let v = Vec3::new(basis[(3 * i, j)], basis[(3 * i + 1, j)], basis[(3 * i + 2, j)]);
            let w = p * v;
            for c in 0..3 {
                basis_c[(3 * i + c, j)] = w[c];
            }
        }
        let col = basis_c.column(j).into_owned();
        if col[col.iamax()] < 0.0 {
            basis_c.set_column(j, &(-col));
            for mu in coeffs.iter_mut() {
                mu[j] = -mu[j];
            }
        }
    }
    for e in &mut eigenvalues {
        *e *= s * s;
    }
    for mu in coeffs.iter_mut() {
        *mu *= s;
    }
    let pt = p.transpose();
    for cam in cams.iter_mut() {
        cam.r *= pt;
        cam.c /= s;
    }
    let mut mid = 0.0;
    let mut cnt = 0.0;
    for &(r, l) in &layout.symmetry_pairs {
        mid += 0.5 * (mean_c[r].x + mean_c[l].x);
        cnt += 1.0;
    }
    for &i in &layout.on_plane {
        mid += mean_c[i].x;
        cnt += 1.0;
    }
    let d = if cnt > 0.0 { mid / cnt } else { 0.0 };
    let (length, width, height) = extents(&mean_c);
    let prior = ShapePrior {
        layout: layout.clone(),
        mean: mean_c,
        basis: basis_c,
        eigenvalues,
        sigma2: model.sigma2,
        medial_plane: Plane::new(Vec3::x(), -d),
        dim_priors: DimPriors { length, width, height },
    };
    prior.validate()?;
    Ok(prior)
}
