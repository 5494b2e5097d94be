//! Shape-aware adjustment: basis coefficients and face planes at a fixed pose.

use crate::energy::{EnergyBreakdown, EnergyConfig, EnergyModel, ShapeState};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, QuatPose, Vec3};
use crate::lm::{minimize, LmOptions, Termination};
use crate::mesh::Plane;
use crate::pose::{check_observations, reprojection_errors, update_weights, visibility_prior, weight_init, KeypointObservation};
use crate::prior::{LatentCoeffs, ShapePrior};

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReconstruction {
    pub lambda: LatentCoeffs,
    pub planes: Vec<Plane>,
    /// `instantiate(prior, lambda)`.
    pub keypoints3d: Vec<Vec3>,
    pub kp_weights: Vec<f64>,
    pub energy_breakdown: EnergyBreakdown,
    /// Energy of the starting state under the final weights, so that it is
    /// comparable with `energy_breakdown`.
    pub initial_energy: EnergyBreakdown,
    pub rounds: usize,
    /// Set when a solve could not make progress from a finite state; the
    /// best state seen is returned.
    pub diverged: bool,
    pub diagnostics: Vec<String>,
}

/// Minimizes the shape energy over `(λ, planes)` with the pose held fixed.
///
/// The first solve starts from `λ = 0` and the best-fit planes of the mean
/// shape with weights from detector confidence and visibility. Each of the
/// `irls_rounds` further rounds updates the keypoint weights from the current
/// reprojection errors and re-solves from the previous state.
pub fn shape_adjust(
    prior: &ShapePrior,
    obs: &[KeypointObservation],
    pose: &QuatPose,
    k: &Intrinsics,
    config: &EnergyConfig,
) -> Result<InstanceReconstruction> {
    shape_adjust_from(prior, obs, pose, k, config, None)
}

/// [`shape_adjust`] with explicit starting keypoint weights, typically the
/// final IRLS weights of the pose stage. Weights of keypoints that are not
/// visible are ignored.
pub fn shape_adjust_from(
    prior: &ShapePrior,
    obs: &[KeypointObservation],
    pose: &QuatPose,
    k: &Intrinsics,
    config: &EnergyConfig,
    initial_weights: Option<&[f64]>,
) -> Result<InstanceReconstruction> {
    prior.validate()?;
    let n = prior.num_keypoints();
    check_observations(obs, n)?;
    let irls = &config.irls;
    let usable = |o: &&KeypointObservation| o.visible && o.uv.iter().all(|v| v.is_finite());
    let active: Vec<usize> = obs.iter().filter(usable).map(|o| o.index).collect();

    let mut weights = vec![0.0; n];
    match initial_weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::DegenerateInput(format!("{} initial weights for {n} keypoints", w.len())));
            }
            for &i in &active {
                weights[i] = w[i].clamp(irls.weight_floor, 1.0);
            }
        }
        None => {
            let w_vis = visibility_prior(&prior.mean, prior.topology(), pose, irls.v_occ)?;
            for o in obs.iter().filter(usable) {
                weights[o.index] = weight_init(o.w_cnn, w_vis[o.index], irls.mu0, irls.weight_floor);
            }
        }
    }
    let start = ShapeState::initial(prior)?;
    let mut model = EnergyModel::new(prior, obs, pose, k, weights, config)?;

    let opts = LmOptions {
        max_iters: config.nls_max_iters,
        ftol: config.nls_tol,
        ..LmOptions::default()
    };
    let nb = prior.basis_size();
    let mut x = start.to_vector();
    let mut diverged = false;
    let mut diagnostics = Vec::new();
    for round in 0..=config.irls_rounds {
        if round > 0 {
            let state = ShapeState::from_vector(&x, nb);
            let shape = model.shape(&state)?;
            let err = reprojection_errors(&shape, obs, pose, k)?;
            let w_vis = visibility_prior(&shape, prior.topology(), pose, irls.v_occ)?;
            let mut w = model.weights().to_vec();
            update_weights(&mut w, &err, &w_vis, &active, irls);
            model.set_weights(w)?;
        }
        match minimize(&model, x.clone(), &opts) {
            Some((xn, rep)) => {
                if rep.termination == Termination::Stalled && rep.final_cost >= rep.initial_cost {
                    diagnostics.push(format!("round {round}: solver made no progress"));
                }
                x = xn;
            }
            None => {
                diverged = true;
                diagnostics.push(format!("round {round}: residuals not finite at the start point"));
                break;
            }
        }
    }

    let mut state = ShapeState::from_vector(&x, nb);
    let mut breakdown = model.breakdown(&state)?;
    // never end worse than the starting point under the final weights
    let initial_energy = model.breakdown(&start)?;
    if !(breakdown.total <= initial_energy.total) {
        diagnostics.push("returned the starting state: the solve ended above it".into());
        diverged = true;
        state = start;
        breakdown = initial_energy;
    }
    Ok(InstanceReconstruction {
        keypoints3d: model.shape(&state)?,
        lambda: state.lambda,
        planes: state.planes,
        kp_weights: model.weights().to_vec(),
        energy_breakdown: breakdown,
        initial_energy,
        rounds: config.irls_rounds,
        diverged,
        diagnostics,
    })
}
