//! Dense Levenberg–Marquardt for small least-squares problems.
//!
//! Minimizes `‖r(x)‖²`. A step is accepted only if it strictly lowers the
//! cost, so the recorded cost history is nonincreasing.

use nalgebra::{DMatrix, DVector};

/// A residual function with analytic Jacobian.
pub trait LeastSquaresProblem {
    /// Residuals at `x`, or `None` when `x` is outside the feasible region.
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>>;

    /// Residuals and Jacobian (rows = residuals, columns = parameters).
    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)>;

    /// Map a parameter vector back onto its manifold after a step. Must not
    /// change the cost.
    fn retract(&self, _x: &mut DVector<f64>) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub ftol: f64,
    /// Stop when `‖Jᵀr‖∞` falls below this.
    pub gtol: f64,
    /// Stop when the step is smaller than `xtol · (‖x‖ + xtol)`.
    pub xtol: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            ftol: 1e-12,
            gtol: 1e-12,
            xtol: 1e-12,
            initial_damping: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CostConverged,
    GradientConverged,
    StepConverged,
    MaxIterations,
    /// Damping grew without finding a decrease.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
}

/// Runs LM from `x0`. Returns `None` if `x0` itself is infeasible.
pub fn minimize<P: LeastSquaresProblem>(
    problem: &P,
    x0: DVector<f64>,
    opts: &LmOptions,
) -> Option<(DVector<f64>, LmReport)> {
    let mut x = x0;
    problem.retract(&mut x);
    let (mut r, mut jac) = problem.residuals_and_jacobian(&x)?;
    let mut cost = r.norm_squared();
    let initial_cost = cost;
    let mut history = vec![cost];
    let n = x.len();

    let mut jtj = jac.tr_mul(&jac);
    let max_diag = (0..n).map(|i| jtj[(i, i)]).fold(0.0f64, f64::max);
    let mut mu = opts.initial_damping * max_diag.max(1e-12);
    let mut nu = 2.0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let g = jac.tr_mul(&r);
        if g.amax() <= opts.gtol {
            termination = Termination::GradientConverged;
            break;
        }
        let diag_floor = 1e-12 * max_diag.max(1e-300);
        let mut accepted = false;
        let mut step_tiny = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * jtj[(i, i)].max(diag_floor).max(1e-12);
            }
            let delta = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    mu *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            if delta.norm() <= opts.xtol * (x.norm() + opts.xtol) {
                step_tiny = true;
                break;
            }
            let mut xn = &x + &delta;
            problem.retract(&mut xn);
            let Some(rn) = problem.residuals(&xn) else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let cn = rn.norm_squared();
            if cn.is_finite() && cn < cost {
                // predicted decrease of the linear model, for the gain ratio
                let pred = -(2.0 * g.dot(&delta) + (&jac * &delta).norm_squared());
                let rho = if pred > 0.0 { (cost - cn) / pred } else { 0.0 };
                mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                let rel = (cost - cn) / cost.max(1e-300);
                x = xn;
                cost = cn;
                history.push(cost);
                match problem.residuals_and_jacobian(&x) {
                    Some((r2, j2)) => {
                        r = r2;
                        jac = j2;
                    }
                    None => return None,
                }
                jtj = jac.tr_mul(&jac);
                accepted = true;
                if rel < opts.ftol {
                    termination = Termination::CostConverged;
                }
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        if step_tiny {
            termination = Termination::StepConverged;
            break;
        }
        if !accepted {
            termination = Termination::Stalled;
            break;
        }
        if termination == Termination::CostConverged || cost == 0.0 {
            termination = Termination::CostConverged;
            break;
        }
    }

    Some((
        x,
        LmReport {
            initial_cost,
            final_cost: cost,
            iterations,
            cost_history: history,
            termination,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock as residuals (1-x, 10(y-x²)).
    struct Rosen;

    impl LeastSquaresProblem for Rosen {
        fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![1.0 - x[0], 10.0 * (x[1] - x[0] * x[0])]))
        }
        fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
            let j = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * x[0], 10.0]);
            Some((self.residuals(x)?, j))
        }
    }

    #[test]
    fn solves_rosenbrock_monotonically() {
        let (x, rep) = minimize(&Rosen, DVector::from_vec(vec![-1.2, 1.0]), &LmOptions::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8, "{x}");
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.final_cost < 1e-16);
    }

    /// Feasible region x > 0.5; the optimum of (x-0)² is on the boundary.
    struct Barrier;

    impl LeastSquaresProblem for Barrier {
        fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
            (x[0] > 0.5).then(|| DVector::from_vec(vec![x[0]]))
        }
        fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
            Some((self.residuals(x)?, DMatrix::from_element(1, 1, 1.0)))
        }
    }

    #[test]
    fn respects_infeasible_region() {
        let (x, _) = minimize(&Barrier, DVector::from_vec(vec![3.0]), &LmOptions::default()).unwrap();
        assert!(x[0] > 0.5);
        assert!(minimize(&Barrier, DVector::from_vec(vec![0.0]), &LmOptions::default()).is_none());
    }
}
