//! Shape energy terms as stacked least-squares residuals.
//!
//! Every term is `Σ r²` over a residual vector whose Jacobian is known in
//! closed form, so the same code serves energy values, gradients (`2Jᵀr`)
//! and the damped least-squares solver in [`crate::adjust`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Mat3, QuatPose, Vec3};
use crate::mesh::{Plane, QuadMesh};
use crate::pose::{IrlsConfig, KeypointObservation};
use crate::prior::{instantiate, DimPriors, LatentCoeffs, ShapePrior};

/// Depth (meters) below which the reprojection barrier engages.
pub const BARRIER_DEPTH: f64 = 0.1;
/// Barrier residual per meter of depth violation, in pixels.
pub const BARRIER_GAIN: f64 = 1e3;

/// Neighbor weighting of the Laplacian term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LapKernel {
    /// `ω_ij ∝ exp(−‖X_i − X_j‖²)`, normalized over the neighbors of `i`.
    #[default]
    Normalized,
    /// Raw `exp(−‖X_i − X_j‖²)` weights without normalization.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub eta_reproj: f64,
    pub eta_planar: f64,
    pub eta_sym: f64,
    pub eta_dim: f64,
    pub eta_lap: f64,
    /// Weight of the `(1 − ‖n‖²)²` normal-norm penalty.
    pub mu_f: f64,
    pub mu_l: f64,
    pub mu_w: f64,
    pub mu_h: f64,
    pub rect_weight: f64,
    /// Ground normal in the object frame; `None` disables the ground term.
    pub ground_normal: Option<[f64; 3]>,
    pub lap_kernel: LapKernel,
    /// Weight updates after the first solve.
    pub irls_rounds: usize,
    pub nls_max_iters: usize,
    pub nls_tol: f64,
    /// Weight initialization and update parameters.
    pub irls: IrlsConfig,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            eta_reproj: 1.0,
            eta_planar: 0.1,
            eta_sym: 0.5,
            eta_dim: 100.0,
            eta_lap: 0.05,
            mu_f: 1.0,
            mu_l: 1.0,
            mu_w: 1.0,
            mu_h: 1.0,
            rect_weight: 0.1,
            ground_normal: Some([0.0, 1.0, 0.0]),
            lap_kernel: LapKernel::Normalized,
            irls_rounds: 5,
            nls_max_iters: 100,
            nls_tol: 1e-10,
            irls: IrlsConfig::default(),
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            self.eta_reproj,
            self.eta_planar,
            self.eta_sym,
            self.eta_dim,
            self.eta_lap,
            self.mu_f,
            self.mu_l,
            self.mu_w,
            self.mu_h,
            self.rect_weight,
        ];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("energy weights must be finite and nonnegative".into()));
        }
        if let Some(g) = self.ground_normal {
            let g = Vec3::from(g);
            if !(g.norm() > 0.0 && g.iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidConfig("ground_normal must be a nonzero finite vector".into()));
            }
        }
        if self.nls_max_iters == 0 || !(self.nls_tol >= 0.0) {
            return Err(Error::InvalidConfig("nls_max_iters must be positive and nls_tol nonnegative".into()));
        }
        self.irls.validate()
    }

    fn ground(&self) -> Option<Vec3> {
        self.ground_normal.map(Vec3::from)
    }

    fn eta(&self, term: Term) -> f64 {
        match term {
            Term::Reproj => self.eta_reproj,
            Term::Planar => self.eta_planar,
            Term::Sym => self.eta_sym,
            Term::Dim => self.eta_dim,
            Term::Lap => self.eta_lap,
        }
    }
}

/// The five energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Reproj,
    Planar,
    Sym,
    Dim,
    Lap,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Reproj, Term::Planar, Term::Sym, Term::Dim, Term::Lap];

    pub fn name(self) -> &'static str {
        match self {
            Term::Reproj => "reproj",
            Term::Planar => "planar",
            Term::Sym => "sym",
            Term::Dim => "dim",
            Term::Lap => "lap",
        }
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub reproj: f64,
    pub planar: f64,
    pub sym: f64,
    pub dim: f64,
    pub lap: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Reproj => self.reproj,
            Term::Planar => self.planar,
            Term::Sym => self.sym,
            Term::Dim => self.dim,
            Term::Lap => self.lap,
        }
    }
}

/// Residual rows with sparse Jacobian rows over a fixed column space.
#[derive(Debug, Default)]
pub(crate) struct Rows {
    pub r: Vec<f64>,
    pub jac: Vec<Vec<(usize, f64)>>,
}

impl Rows {
    fn push(&mut self, v: f64, entries: Vec<(usize, f64)>) {
        self.r.push(v);
        self.jac.push(entries);
    }

    /// Three rows `r`, each with 3×3 blocks `(first column, block)`.
    fn push3(&mut self, r: Vec3, blocks: &[(usize, Mat3)]) {
        for c in 0..3 {
            let mut e = Vec::with_capacity(3 * blocks.len());
            for (col, m) in blocks {
                for k in 0..3 {
                    e.push((col + k, m[(c, k)]));
                }
            }
            self.push(r[c], e);
        }
    }

    fn value(&self) -> f64 {
        self.r.iter().map(|v| v * v).sum()
    }

    /// `2 Jᵀ r` over `ncols` columns.
    fn gradient(&self, ncols: usize) -> DVector<f64> {
        let mut g = DVector::zeros(ncols);
        for (v, row) in self.r.iter().zip(&self.jac) {
            for &(c, d) in row {
                g[c] += 2.0 * v * d;
            }
        }
        g
    }
}

fn xcol(i: usize) -> usize {
    3 * i
}

fn pcol(k: usize, f: usize) -> usize {
    3 * k + 4 * f
}

fn reproj_rows(
    shape: &[Vec3],
    r: &Mat3,
    t: &Vec3,
    obs: &[KeypointObservation],
    k: &Intrinsics,
    weights: &[f64],
) -> Rows {
    let mut rows = Rows::default();
    for o in obs.iter().filter(|o| o.visible && o.uv.iter().all(|v| v.is_finite())) {
        let i = o.index;
        let w = weights[i];
        let pc = r * shape[i] + t;
        let clamped = pc.z < BARRIER_DEPTH;
        let pe = Vec3::new(pc.x, pc.y, pc.z.max(BARRIER_DEPTH));
        let e = (k.project_unchecked(&pe) - o.uv) * w;
        let mut jp = k.projection_jacobian(&pe) * w;
        if clamped {
            jp.column_mut(2).fill(0.0);
        }
        let j = jp * r;
        for c in 0..2 {
            rows.push(e[c], (0..3).map(|m| (xcol(i) + m, j[(c, m)])).collect());
        }
    }
    // keep every keypoint in front of the camera
    for (i, x) in shape.iter().enumerate() {
        let z = (r * x + t).z;
        if z < BARRIER_DEPTH {
            let g = -r.row(2) * BARRIER_GAIN;
            rows.push(BARRIER_GAIN * (BARRIER_DEPTH - z), (0..3).map(|m| (xcol(i) + m, g[m])).collect());
        } else {
            rows.push(0.0, Vec::new());
        }
    }
    rows
}

fn planar_rows(
    shape: &[Vec3],
    topology: &QuadMesh,
    planes: &[Plane],
    mu_f: f64,
    ground: Option<&Vec3>,
    rect_weight: f64,
) -> Rows {
    let nk = shape.len();
    let mut rows = Rows::default();
    let sf = mu_f.sqrt();
    let sr = rect_weight.sqrt();
    for (f, (face, pl)) in topology.faces().iter().zip(planes).enumerate() {
        let pc = pcol(nk, f);
        let n = pl.n;
        for &v in &face.vertices {
            let x = shape[v];
            let mut e: Vec<(usize, f64)> = (0..3).map(|m| (xcol(v) + m, n[m])).collect();
            e.extend((0..3).map(|m| (pc + m, x[m])));
            e.push((pc + 3, 1.0));
            rows.push(n.dot(&x) + pl.d, e);
        }
        rows.push(
            sf * (1.0 - n.norm_squared()),
            (0..3).map(|m| (pc + m, -2.0 * sf * n[m])).collect(),
        );
        if face.rectangular {
            let vs = face.vertices;
            for c in 0..4 {
                let (a, b, cc) = (vs[(c + 3) % 4], vs[c], vs[(c + 1) % 4]);
                let u = shape[a] - shape[b];
                let w = shape[cc] - shape[b];
                let (nu, nw) = (u.norm(), w.norm());
                if nu == 0.0 || nw == 0.0 {
                    rows.push(0.0, Vec::new());
                    continue;
                }
                let cos = u.dot(&w) / (nu * nw);
                let du = (w / (nu * nw) - u * (cos / (nu * nu))) * sr;
                let dw = (u / (nu * nw) - w * (cos / (nw * nw))) * sr;
                let db = -(du + dw);
                let mut e = Vec::with_capacity(9);
                for (vtx, d) in [(a, du), (cc, dw), (b, db)] {
                    e.extend((0..3).map(|m| (xcol(vtx) + m, d[m])));
                }
                rows.push(sr * cos, e);
            }
        }
        if let (true, Some(g)) = (face.ground_parallel, ground) {
            // ‖m × ĝ‖² = sin² of the angle between the face normal and ĝ
            let gh = g.normalize();
            let nn = n.norm();
            if nn == 0.0 {
                for _ in 0..3 {
                    rows.push(0.0, Vec::new());
                }
                continue;
            }
            let m = n / nn;
            let gx = gh.cross_matrix();
            let res = -(gx * m);
            let d = -(gx * (Mat3::identity() - m * m.transpose())) / nn;
            rows.push3(res, &[(pc, d)]);
        }
    }
    rows
}

fn sym_rows(shape: &[Vec3], pairs: &[(usize, usize)], medial: &Plane) -> Rows {
    let mut rows = Rows::default();
    let n = medial.n;
    let reflect = Mat3::identity() - n * n.transpose() * 2.0;
    for &(r, l) in pairs {
        let res = shape[r] - n * (2.0 * medial.signed_distance(&shape[r])) - shape[l];
        rows.push3(res, &[(xcol(r), reflect), (xcol(l), -Mat3::identity())]);
    }
    rows
}

/// Index of the (first) minimum and maximum of coordinate `c`.
fn arg_extremes(shape: &[Vec3], c: usize) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, x) in shape.iter().enumerate() {
        if x[c] < shape[lo][c] {
            lo = i;
        }
        if x[c] > shape[hi][c] {
            hi = i;
        }
    }
    (lo, hi)
}

fn dim_rows(shape: &[Vec3], dims: &DimPriors, mu: [f64; 3]) -> Rows {
    let mut rows = Rows::default();
    // length along z, width along x, height along y
    for (c, target, m) in [(2, dims.length, mu[0]), (0, dims.width, mu[1]), (1, dims.height, mu[2])] {
        let s = m.sqrt();
        let (lo, hi) = arg_extremes(shape, c);
        let ext = shape[hi][c] - shape[lo][c];
        let e = if lo == hi {
            Vec::new()
        } else {
            vec![(xcol(hi) + c, s), (xcol(lo) + c, -s)]
        };
        rows.push(s * (ext - target), e);
    }
    rows
}

fn lap_rows(shape: &[Vec3], neighbors: &[Vec<usize>], kernel: LapKernel) -> Rows {
    let mut rows = Rows::default();
    let id = Mat3::identity();
    for (i, nb) in neighbors.iter().enumerate() {
        let xi = shape[i];
        let a: Vec<f64> = nb.iter().map(|&j| (-(xi - shape[j]).norm_squared()).exp()).collect();
        let mut blocks: Vec<(usize, Mat3)> = Vec::with_capacity(nb.len() + 1);
        let res;
        match kernel {
            LapKernel::Normalized => {
                let z: f64 = a.iter().sum();
                if !(z > 0.0) {
                    // every neighbor is too far for the kernel to register: treat as uniform
                    let y = nb.iter().map(|&j| shape[j]).sum::<Vec3>() / nb.len() as f64;
                    rows.push3(xi - y, &[]);
                    continue;
                }
                let w: Vec<f64> = a.iter().map(|v| v / z).collect();
                let y = nb.iter().zip(&w).map(|(&j, wj)| shape[j] * *wj).sum::<Vec3>();
                let mut cov = -y * y.transpose();
                for (&j, wj) in nb.iter().zip(&w) {
                    cov += shape[j] * shape[j].transpose() * *wj;
                }
                res = xi - y;
                blocks.push((xcol(i), id - cov * 2.0));
                for (&j, wj) in nb.iter().zip(&w) {
                    let xj = shape[j];
                    blocks.push((xcol(j), -id * *wj - (xj - y) * (xi - xj).transpose() * (2.0 * wj)));
                }
            }
            LapKernel::Raw => {
                let y = nb.iter().zip(&a).map(|(&j, aj)| shape[j] * *aj).sum::<Vec3>();
                let mut di = id;
                for (&j, aj) in nb.iter().zip(&a) {
                    let xj = shape[j];
                    di += xj * (xi - xj).transpose() * (2.0 * aj);
                    blocks.push((xcol(j), -id * *aj - xj * (xi - xj).transpose() * (2.0 * aj)));
                }
                res = xi - y;
                blocks.push((xcol(i), di));
            }
        }
        rows.push3(res, &blocks);
    }
    rows
}

fn neighbor_lists(topology: &QuadMesh) -> Vec<Vec<usize>> {
    (0..topology.vertex_count()).map(|i| topology.neighbors(i).to_vec()).collect()
}

fn check_weights(obs: &[KeypointObservation], k: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != k {
        return Err(Error::DegenerateInput(format!("expected {k} weights, got {}", weights.len())));
    }
    if let Some(o) = obs.iter().find(|o| o.index >= k) {
        return Err(Error::DegenerateInput(format!("keypoint index {} out of range", o.index)));
    }
    Ok(())
}

/// `Σ w_i² ‖project(X_i) − x_i‖²` over visible observations, plus a
/// barrier for points closer than [`BARRIER_DEPTH`] to the camera plane.
pub fn e_reproj(
    shape: &[Vec3],
    pose: &QuatPose,
    obs: &[KeypointObservation],
    k: &Intrinsics,
    weights: &[f64],
) -> Result<f64> {
    check_weights(obs, shape.len(), weights)?;
    Ok(reproj_rows(shape, &pose.rotation()?, &pose.t, obs, k, weights).value())
}

/// Point-to-plane, normal-norm, rectangularity and ground-alignment terms
/// summed over faces. `planes[f]` belongs to `topology.faces()[f]`.
pub fn e_planar(
    shape: &[Vec3],
    topology: &QuadMesh,
    planes: &[Plane],
    mu_f: f64,
    ground_normal: Option<&Vec3>,
    rect_weight: f64,
) -> Result<f64> {
    if planes.len() != topology.faces().len() {
        return Err(Error::DegenerateInput(format!(
            "expected {} planes, got {}",
            topology.faces().len(),
            planes.len()
        )));
    }
    Ok(planar_rows(shape, topology, planes, mu_f, ground_normal, rect_weight).value())
}

/// `Σ ‖reflect(X_r) − X_l‖²` across the medial plane.
pub fn e_sym(shape: &[Vec3], pairs: &[(usize, usize)], medial: &Plane) -> f64 {
    sym_rows(shape, pairs, medial).value()
}

/// Squared deviations of the canonical-frame extents from the priors.
pub fn e_dim(shape: &[Vec3], dims: &DimPriors, mu_l: f64, mu_w: f64, mu_h: f64) -> f64 {
    dim_rows(shape, dims, [mu_l, mu_w, mu_h]).value()
}

/// `Σ_i ‖X_i − Σ_j ω_ij X_j‖²` with normalized Gaussian neighbor weights.
pub fn e_lap(shape: &[Vec3], topology: &QuadMesh) -> f64 {
    e_lap_with(shape, topology, LapKernel::Normalized)
}

pub fn e_lap_with(shape: &[Vec3], topology: &QuadMesh, kernel: LapKernel) -> f64 {
    lap_rows(shape, &neighbor_lists(topology), kernel).value()
}

/// Optimization variables of shape adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeState {
    pub lambda: LatentCoeffs,
    /// One plane per topology face.
    pub planes: Vec<Plane>,
}

impl ShapeState {
    /// `λ = 0` with the best-fit plane of every face of the mean shape.
    pub fn initial(prior: &ShapePrior) -> Result<Self> {
        let planes = prior
            .topology()
            .faces()
            .iter()
            .map(|f| Plane::fit(&f.vertices.map(|v| prior.mean[v])))
            .collect::<Result<_>>()?;
        Ok(Self {
            lambda: LatentCoeffs::zeros(prior.basis_size()),
            planes,
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.lambda.len() + 4 * self.planes.len());
        v.extend(self.lambda.0.iter());
        for p in &self.planes {
            v.extend([p.n.x, p.n.y, p.n.z, p.d]);
        }
        DVector::from_vec(v)
    }

    pub fn from_vector(x: &DVector<f64>, basis_size: usize) -> Self {
        let lambda = LatentCoeffs(x.rows(0, basis_size).into_owned());
        let planes = x.as_slice()[basis_size..]
            .chunks_exact(4)
            .map(|c| Plane::new(Vec3::new(c[0], c[1], c[2]), c[3]))
            .collect();
        Self { lambda, planes }
    }
}

/// Fixed data of one shape-adjustment problem. The pose and medial plane
/// are constants; `(λ, planes)` are the variables.
#[derive(Debug, Clone)]
pub struct EnergyModel<'a> {
    pub prior: &'a ShapePrior,
    pub obs: &'a [KeypointObservation],
    pub k: &'a Intrinsics,
    pub config: &'a EnergyConfig,
    rotation: Mat3,
    translation: Vec3,
    neighbors: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl<'a> EnergyModel<'a> {
    pub fn new(
        prior: &'a ShapePrior,
        obs: &'a [KeypointObservation],
        pose: &QuatPose,
        k: &'a Intrinsics,
        weights: Vec<f64>,
        config: &'a EnergyConfig,
    ) -> Result<Self> {
        config.validate()?;
        k.validate()?;
        check_weights(obs, prior.num_keypoints(), &weights)?;
        prior.topology().check_connected_vertices()?;
        Ok(Self {
            prior,
            obs,
            k,
            config,
            rotation: pose.rotation()?,
            translation: pose.t,
            neighbors: neighbor_lists(prior.topology()),
            weights,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        check_weights(self.obs, self.prior.num_keypoints(), &weights)?;
        self.weights = weights;
        Ok(())
    }

    pub fn num_vars(&self) -> usize {
        self.prior.basis_size() + 4 * self.prior.topology().faces().len()
    }

    pub fn shape(&self, state: &ShapeState) -> Result<Vec<Vec3>> {
        instantiate(self.prior, &state.lambda)
    }

    fn check_state(&self, state: &ShapeState) -> Result<()> {
        if state.lambda.len() != self.prior.basis_size() || state.planes.len() != self.prior.topology().faces().len()
        {
            return Err(Error::DegenerateInput("state dimensions do not match the prior".into()));
        }
        Ok(())
    }

    fn rows(&self, term: Term, shape: &[Vec3], planes: &[Plane]) -> Rows {
        let c = self.config;
        match term {
            Term::Reproj => reproj_rows(shape, &self.rotation, &self.translation, self.obs, self.k, &self.weights),
            Term::Planar => planar_rows(
                shape,
                self.prior.topology(),
                planes,
                c.mu_f,
                c.ground().as_ref(),
                c.rect_weight,
            ),
            Term::Sym => sym_rows(shape, &self.prior.layout.symmetry_pairs, &self.prior.medial_plane),
            Term::Dim => dim_rows(shape, &self.prior.dim_priors, [c.mu_l, c.mu_w, c.mu_h]),
            Term::Lap => lap_rows(shape, &self.neighbors, c.lap_kernel),
        }
    }

    /// Gradient over `[λ | planes]` from a gradient over `[X | planes]`.
    fn chain(&self, gx: &DVector<f64>) -> DVector<f64> {
        let nk3 = 3 * self.prior.num_keypoints();
        let nb = self.prior.basis_size();
        let mut g = DVector::zeros(self.num_vars());
        g.rows_mut(0, nb).copy_from(&self.prior.basis.tr_mul(&gx.rows(0, nk3)));
        g.rows_mut(nb, gx.len() - nk3).copy_from(&gx.rows(nk3, gx.len() - nk3));
        g
    }

    fn xcols(&self) -> usize {
        3 * self.prior.num_keypoints() + 4 * self.prior.topology().faces().len()
    }

    /// Unweighted value of every term and the weighted total.
    pub fn breakdown(&self, state: &ShapeState) -> Result<EnergyBreakdown> {
        self.check_state(state)?;
        let shape = self.shape(state)?;
        let v = |t| self.rows(t, &shape, &state.planes).value();
        let mut b = EnergyBreakdown {
            reproj: v(Term::Reproj),
            planar: v(Term::Planar),
            sym: v(Term::Sym),
            dim: v(Term::Dim),
            lap: v(Term::Lap),
            total: 0.0,
        };
        b.total = Term::ALL.iter().map(|&t| self.config.eta(t) * b.get(t)).sum();
        Ok(b)
    }

    /// Unweighted value and gradient of one term.
    pub fn term(&self, term: Term, state: &ShapeState) -> Result<(f64, DVector<f64>)> {
        self.check_state(state)?;
        let shape = self.shape(state)?;
        let rows = self.rows(term, &shape, &state.planes);
        Ok((rows.value(), self.chain(&rows.gradient(self.xcols()))))
    }

    /// Weighted total energy and its gradient over `[λ | planes]`.
    pub fn e_total(&self, state: &ShapeState) -> Result<(f64, DVector<f64>)> {
        let mut total = 0.0;
        let mut grad = DVector::zeros(self.num_vars());
        for t in Term::ALL {
            let eta = self.config.eta(t);
            if eta == 0.0 {
                continue;
            }
            let (v, g) = self.term(t, state)?;
            total += eta * v;
            grad += g * eta;
        }
        Ok((total, grad))
    }

    /// Stacked residuals `√η_t · r_t` and their Jacobian over `[λ | planes]`.
    pub(crate) fn stacked(&self, x: &DVector<f64>, with_jac: bool) -> Option<(DVector<f64>, Option<DMatrix<f64>>)> {
        let state = ShapeState::from_vector(x, self.prior.basis_size());
        let shape = self.shape(&state).ok()?;
        let nk3 = 3 * self.prior.num_keypoints();
        let nb = self.prior.basis_size();
        let mut parts = Vec::with_capacity(5);
        let mut nrows = 0;
        for t in Term::ALL {
            let eta = self.config.eta(t);
            if eta == 0.0 {
                continue;
            }
            let rows = self.rows(t, &shape, &state.planes);
            nrows += rows.r.len();
            parts.push((eta.sqrt(), rows));
        }
        let mut r = DVector::zeros(nrows);
        let mut jx = with_jac.then(|| DMatrix::zeros(nrows, self.xcols()));
        let mut at = 0;
        for (s, rows) in &parts {
            for (i, (v, entries)) in rows.r.iter().zip(&rows.jac).enumerate() {
                r[at + i] = s * v;
                if let Some(j) = jx.as_mut() {
                    for &(c, d) in entries {
                        j[(at + i, c)] += s * d;
                    }
                }
            }
            at += rows.r.len();
        }
        if r.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let jac = jx.map(|jx| {
            let mut j = DMatrix::zeros(nrows, self.num_vars());
            j.columns_mut(0, nb).copy_from(&(jx.columns(0, nk3) * &self.prior.basis));
            let np = jx.ncols() - nk3;
            j.columns_mut(nb, np).copy_from(&jx.columns(nk3, np));
            j
        });
        Some((r, jac))
    }
}

impl crate::lm::LeastSquaresProblem for EnergyModel<'_> {
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.stacked(x, false).map(|(r, _)| r)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        self.stacked(x, true).and_then(|(r, j)| j.map(|j| (r, j)))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{project, viewpoint_rotation, Vec2};
    use crate::mesh::Face;
    use crate::prior::{car_prior, CarParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> (Vec<Vec3>, QuadMesh) {
        let s = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        (s, QuadMesh::new(4, vec![Face::new([0, 1, 2, 3]).rectangular()]).unwrap())
    }

    pub(crate) fn test_scene() -> (ShapePrior, QuatPose, Intrinsics) {
        let prior = car_prior(&CarParams::default(), 5).unwrap();
        let pose = QuatPose::from_rotation(&viewpoint_rotation(0.7, 0.15), Vec3::new(0.8, 1.1, 12.0));
        let k = Intrinsics::new(721.5, 721.5, 609.6, 172.9).unwrap();
        (prior, pose, k)
    }

    pub(crate) fn exact_obs(shape: &[Vec3], pose: &QuatPose, k: &Intrinsics) -> Vec<KeypointObservation> {
        shape
            .iter()
            .enumerate()
            .map(|(i, x)| KeypointObservation::new(i, project(x, pose, k).unwrap(), 1.0, true))
            .collect()
    }

    #[test]
    fn reproj_examples() {
        let (prior, pose, k) = test_scene();
        let mut obs = exact_obs(&prior.mean, &pose, &k);
        let w = vec![1.0; 14];
        assert!(e_reproj(&prior.mean, &pose, &obs, &k, &w).unwrap() < 1e-18);
        obs[6].uv += Vec2::new(3.0, 4.0);
        assert_relative_eq!(e_reproj(&prior.mean, &pose, &obs, &k, &w).unwrap(), 25.0, epsilon = 1e-9);
        let mut w2 = w.clone();
        w2[6] = 0.5;
        assert_relative_eq!(e_reproj(&prior.mean, &pose, &obs, &k, &w2).unwrap(), 6.25, epsilon = 1e-9);
        obs[6].visible = false;
        assert!(e_reproj(&prior.mean, &pose, &obs, &k, &w).unwrap() < 1e-18);
    }

    #[test]
    fn depth_barrier_is_finite() {
        let (prior, _, k) = test_scene();
        let pose = QuatPose::from_rotation(&Mat3::identity(), Vec3::new(0.0, 0.0, 0.5));
        let obs: Vec<KeypointObservation> =
            (0..14).map(|i| KeypointObservation::new(i, Vec2::new(600.0, 170.0), 1.0, true)).collect();
        let e = e_reproj(&prior.mean, &pose, &obs, &k, &[1.0; 14]).unwrap();
        assert!(e.is_finite() && e > 1e5);
    }

    #[test]
    fn planar_examples() {
        let (s, mesh) = unit_square();
        let z = Plane::new(Vec3::z(), 0.0);
        assert!(e_planar(&s, &mesh, &[z], 1.0, None, 1.0).unwrap() < 1e-30);
        let big = Plane::new(Vec3::z() * 2.0, 0.0);
        for mu in [1.0, 0.3] {
            assert_relative_eq!(e_planar(&s, &mesh, &[big], mu, None, 1.0).unwrap(), 9.0 * mu, epsilon = 1e-12);
        }
        // ground term: a tilted normal pays sin²
        let ground_mesh = QuadMesh::new(4, vec![Face::new([0, 1, 2, 3]).ground_parallel()]).unwrap();
        let g = Vec3::z();
        assert!(e_planar(&s, &ground_mesh, &[z], 1.0, Some(&g), 0.0).unwrap() < 1e-30);
        let e = e_planar(&s, &ground_mesh, &[z], 1.0, Some(&Vec3::new(0.0, 1.0, 1.0)), 0.0).unwrap();
        assert_relative_eq!(e, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn planar_vanishes_with_flatness() {
        let (_, mesh) = unit_square();
        let mut prev = f64::INFINITY;
        for eps in [0.2, 0.1, 0.05, 0.01, 0.0] {
            let s = vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, eps),
            ];
            let plane = Plane::fit(&s).unwrap();
            let e = e_planar(&s, &mesh, &[plane], 1.0, None, 0.0).unwrap();
            // oracle: the smallest covariance eigenvalue is the residual of the best-fit plane
            let c = s.iter().sum::<Vec3>() / 4.0;
            let cov: Mat3 = s.iter().map(|p| (p - c) * (p - c).transpose()).sum();
            let lmin = cov.symmetric_eigenvalues().min();
            assert_relative_eq!(e, lmin, epsilon = 1e-12);
            if eps > 0.0 {
                assert!(e > 0.0 && e < prev);
            } else {
                assert!(e < 1e-30);
            }
            prev = e;
        }
    }

    #[test]
    fn sym_examples() {
        let plane = Plane::new(Vec3::x(), 0.0);
        let s = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        assert_eq!(e_sym(&s, &[(0, 1)], &plane), 0.0);
        let s = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 1.0, 0.0)];
        assert_relative_eq!(e_sym(&s, &[(0, 1)], &plane), 1.0);
    }

    #[test]
    fn dim_examples() {
        let (prior, _, _) = test_scene();
        let d = prior.dim_priors;
        assert!(e_dim(&prior.mean, &d, 1.0, 1.0, 1.0) < 1e-24);
        let longer = DimPriors {
            length: d.length - 1.0,
            ..d
        };
        assert_relative_eq!(e_dim(&prior.mean, &longer, 2.0, 1.0, 1.0), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn lap_examples() {
        let s = [Vec3::zeros(), Vec3::new(0.3, 0.4, 1.2)];
        let nb = vec![vec![1], vec![0]];
        for kernel in [LapKernel::Normalized] {
            let rows = lap_rows(&s, &nb, kernel);
            assert_relative_eq!(rows.value(), 2.0 * 1.69, epsilon = 1e-12);
        }
        // vertex at the weighted combination of its neighbors
        let s = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        let rows = lap_rows(&s, &[vec![1, 2]], LapKernel::Normalized);
        assert!(rows.value() < 1e-30);
    }

    #[test]
    fn lap_matches_scalar_oracle_on_tetrahedron() {
        let s = [
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(1.0, -1.0, -1.0),
            Vec3::new(-1.0, 1.0, -1.0),
            Vec3::new(-1.1, -0.9, 1.05),
        ];
        let nb: Vec<Vec<usize>> = (0..4).map(|i| (0..4).filter(|&j| j != i).collect()).collect();
        for kernel in [LapKernel::Normalized, LapKernel::Raw] {
            let mut oracle = 0.0;
            for i in 0..4 {
                let mut acc = [0.0; 3];
                let mut z = 0.0;
                for &j in &nb[i] {
                    let mut d2 = 0.0;
                    for c in 0..3 {
                        d2 += (s[i][c] - s[j][c]) * (s[i][c] - s[j][c]);
                    }
                    let a = (-d2).exp();
                    z += a;
                    for c in 0..3 {
                        acc[c] += a * s[j][c];
                    }
                }
                let norm = if kernel == LapKernel::Normalized { z } else { 1.0 };
                for c in 0..3 {
                    let r = s[i][c] - acc[c] / norm;
                    oracle += r * r;
                }
            }
            assert_relative_eq!(lap_rows(&s, &nb, kernel).value(), oracle, max_relative = 1e-13);
        }
    }

    fn random_state(prior: &ShapePrior, rng: &mut ChaCha8Rng) -> ShapeState {
        let mut st = ShapeState::initial(prior).unwrap();
        for (j, l) in st.lambda.0.iter_mut().enumerate() {
            *l = rng.random_range(-2.0..2.0) * prior.eigenvalues[j].sqrt();
        }
        for p in &mut st.planes {
            p.n += Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            p.d += rng.random_range(-0.3..0.3);
        }
        st
    }

    /// The template with its mirror symmetry broken, in mean and basis, so
    /// no gradient vanishes identically and extents have unique extremes.
    pub(crate) fn generic_prior(mut prior: ShapePrior, rng: &mut ChaCha8Rng) -> ShapePrior {
        for x in prior.mean.iter_mut() {
            *x += Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
        }
        let noisy = prior.basis.map(|v| v + rng.random_range(-0.05..0.05));
        prior.basis = noisy.qr().q();
        prior
    }

    /// Relative error between an analytic gradient and central differences.
    pub(crate) fn fd_error(model: &EnergyModel, term: Option<Term>, state: &ShapeState) -> f64 {
        let f = |s: &ShapeState| match term {
            Some(t) => model.term(t, s).unwrap().0,
            None => model.e_total(s).unwrap().0,
        };
        let g = match term {
            Some(t) => model.term(t, state).unwrap().1,
            None => model.e_total(state).unwrap().1,
        };
        let x0 = state.to_vector();
        let nb = model.prior.basis_size();
        let mut fd = DVector::zeros(x0.len());
        for i in 0..x0.len() {
            let h = 1e-6 * (1.0 + x0[i].abs());
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            fd[i] = (f(&ShapeState::from_vector(&xp, nb)) - f(&ShapeState::from_vector(&xm, nb))) / (2.0 * h);
        }
        let scale = g.norm().max(fd.norm()).max(1e-8);
        (g - fd).norm() / scale
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (prior, pose, k) = test_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = generic_prior(prior, &mut rng);
        let mut obs = exact_obs(&prior.mean, &pose, &k);
        for o in &mut obs {
            o.uv += Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        }
        let weights: Vec<f64> = (0..14).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut cfg = EnergyConfig::default();
        for kernel in [LapKernel::Normalized, LapKernel::Raw] {
            cfg.lap_kernel = kernel;
            let model = EnergyModel::new(&prior, &obs, &pose, &k, weights.clone(), &cfg).unwrap();
            for _ in 0..10 {
                let st = random_state(&prior, &mut rng);
                for t in Term::ALL {
                    let e = fd_error(&model, Some(t), &st);
                    assert!(e < 1e-5, "{} gradient error {e}", t.name());
                }
                assert!(fd_error(&model, None, &st) < 1e-5);
            }
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let (prior, pose, k) = test_scene();
        let obs = exact_obs(&prior.mean, &pose, &k);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let st = random_state(&prior, &mut rng);
        let zero = EnergyConfig {
            eta_reproj: 0.0,
            eta_planar: 0.0,
            eta_sym: 0.0,
            eta_dim: 0.0,
            eta_lap: 0.0,
            ..Default::default()
        };
        let model = EnergyModel::new(&prior, &obs, &pose, &k, vec![1.0; 14], &zero).unwrap();
        let (v, g) = model.e_total(&st).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        for t in Term::ALL {
            let mut cfg = zero.clone();
            match t {
                Term::Reproj => cfg.eta_reproj = 1.0,
                Term::Planar => cfg.eta_planar = 1.0,
                Term::Sym => cfg.eta_sym = 1.0,
                Term::Dim => cfg.eta_dim = 1.0,
                Term::Lap => cfg.eta_lap = 1.0,
            }
            let model = EnergyModel::new(&prior, &obs, &pose, &k, vec![1.0; 14], &cfg).unwrap();
            let shape = model.shape(&st).unwrap();
            let standalone = match t {
                Term::Reproj => e_reproj(&shape, &pose, &obs, &k, &[1.0; 14]).unwrap(),
                Term::Planar => e_planar(
                    &shape,
                    prior.topology(),
                    &st.planes,
                    cfg.mu_f,
                    Some(&Vec3::y()),
                    cfg.rect_weight,
                )
                .unwrap(),
                Term::Sym => e_sym(&shape, &prior.layout.symmetry_pairs, &prior.medial_plane),
                Term::Dim => e_dim(&shape, &prior.dim_priors, 1.0, 1.0, 1.0),
                Term::Lap => e_lap(&shape, prior.topology()),
            };
            assert_relative_eq!(model.e_total(&st).unwrap().0, standalone, max_relative = 1e-14);
            assert_relative_eq!(model.breakdown(&st).unwrap().get(t), standalone, max_relative = 1e-14);
        }
    }

    #[test]
    fn stacked_residuals_reproduce_total() {
        let (prior, pose, k) = test_scene();
        let obs = exact_obs(&prior.mean, &pose, &k);
        let cfg = EnergyConfig::default();
        let model = EnergyModel::new(&prior, &obs, &pose, &k, vec![0.8; 14], &cfg).unwrap();
        let st = random_state(&prior, &mut ChaCha8Rng::seed_from_u64(2));
        let (r, j) = model.stacked(&st.to_vector(), true).unwrap();
        let (v, g) = model.e_total(&st).unwrap();
        assert_relative_eq!(r.norm_squared(), v, max_relative = 1e-12);
        let g2 = j.unwrap().tr_mul(&r) * 2.0;
        assert!((g2 - g).norm() < 1e-9 * (1.0 + v));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sym_is_rigidly_invariant(
            pts in prop::collection::vec((0.1f64..2.0, -1.0f64..1.0, -2.0f64..2.0), 4),
            noise in prop::collection::vec(-0.2f64..0.2, 12),
            axis in (-1.0f64..1.0, -1.0f64..1.0, 0.2f64..1.0),
            angle in -3.0f64..3.0,
            shift in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
        ) {
            // right points and perturbed mirrored left points
            let mut s = Vec::new();
            for (i, &(x, y, z)) in pts.iter().enumerate() {
                s.push(Vec3::new(x, y, z));
                s.push(Vec3::new(-x + noise[3 * i], y + noise[3 * i + 1], z + noise[3 * i + 2]));
            }
            let pairs: Vec<(usize, usize)> = (0..4).map(|i| (2 * i, 2 * i + 1)).collect();
            let plane = Plane::new(Vec3::x(), 0.0);
            let e0 = e_sym(&s, &pairs, &plane);
            let r = crate::geometry::axis_angle(&Vec3::new(axis.0, axis.1, axis.2), angle);
            let t = Vec3::new(shift.0, shift.1, shift.2);
            let moved: Vec<Vec3> = s.iter().map(|x| r * x + t).collect();
            let n = r * plane.n;
            let moved_plane = Plane::new(n, plane.d - n.dot(&t));
            let e1 = e_sym(&moved, &pairs, &moved_plane);
            prop_assert!((e0 - e1).abs() < 1e-10);

            // an exactly symmetric shape has zero energy in any frame
            let sym: Vec<Vec3> = pts.iter().flat_map(|&(x, y, z)| [Vec3::new(x, y, z), Vec3::new(-x, y, z)]).collect();
            let moved: Vec<Vec3> = sym.iter().map(|x| r * x + t).collect();
            prop_assert!(e_sym(&moved, &pairs, &moved_plane) < 1e-12);
        }

        #[test]
        fn terms_are_nonnegative(seed in 0u64..1000) {
            let (prior, pose, k) = test_scene();
            let obs = exact_obs(&prior.mean, &pose, &k);
            let cfg = EnergyConfig::default();
            let model = EnergyModel::new(&prior, &obs, &pose, &k, vec![1.0; 14], &cfg).unwrap();
            let st = random_state(&prior, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = model.breakdown(&st).unwrap();
            for t in Term::ALL {
                prop_assert!(b.get(t) >= 0.0);
            }
        }
    }
}
