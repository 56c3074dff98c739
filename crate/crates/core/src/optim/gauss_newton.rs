//! Gauss-Newton with Levenberg-Marquardt damping.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A nonlinear least-squares problem `min_x |r(x)|^2`.
///
/// `eval` returns the residual vector and its Jacobian together because the
/// two usually share most of their computation; `residuals` exists so step
/// candidates can be costed without assembling a Jacobian.
pub trait LeastSquaresProblem {
    fn dim(&self) -> usize;
    fn eval(&mut self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    fn residuals(&mut self, x: &DVector<f64>) -> DVector<f64> {
        self.eval(x).0
    }
}

/// Adapter so plain closures `x -> (r, J)` can be handed to `gauss_newton`.
pub struct ClosureProblem<F> {
    pub dim: usize,
    pub eval: F,
}

impl<F> LeastSquaresProblem for ClosureProblem<F>
where
    F: FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&mut self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (self.eval)(x)
    }
}

#[derive(Debug, Clone)]
pub struct GaussNewtonOptions {
    pub max_iters: usize,
    /// Initial Levenberg-Marquardt damping factor.
    pub lambda_init: f64,
    /// Damping multiplier after an accepted step.
    pub lambda_shrink: f64,
    /// Damping multiplier after a rejected step.
    pub lambda_grow: f64,
    /// Stop when the relative cost decrease of an accepted step falls below
    /// this threshold.
    pub tol: f64,
    /// Stop when the gradient infinity-norm falls below
    /// `grad_tol * (1 + cost)`.
    pub grad_tol: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        GaussNewtonOptions {
            max_iters: 30,
            lambda_init: 1e-4,
            lambda_shrink: 0.5,
            lambda_grow: 4.0,
            tol: 1e-10,
            grad_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussNewtonReport {
    pub x: DVector<f64>,
    /// Cost (sum of squared residuals) at x0 followed by every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl GaussNewtonReport {
    pub fn initial_cost(&self) -> f64 {
        self.cost_trace[0]
    }
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().unwrap()
    }
}

/// Minimizes `|r(x)|^2` from `x0` by damped Gauss-Newton: each step solves
/// `(J^T J + λ·diag(J^T J)) Δ = -J^T r`, accepting the step when the cost
/// decreases (λ shrinks) and rejecting it otherwise (λ grows). The returned
/// cost never exceeds the cost at `x0`.
pub fn gauss_newton<P: LeastSquaresProblem>(
    problem: &mut P,
    x0: DVector<f64>,
    opts: &GaussNewtonOptions,
) -> Result<GaussNewtonReport> {
    const LAMBDA_MAX: f64 = 1e12;

    let mut x = x0;
    let (mut r, mut jac) = problem.eval(&x);
    let mut cost = check_finite(r.norm_squared(), 0, &x)?;
    let mut lambda = opts.lambda_init;
    let mut trace = vec![cost];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() <= opts.grad_tol * (1.0 + cost) {
            converged = true;
            break;
        }

        // Retry the step with stronger damping until it lowers the cost.
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut damped = jtj.clone();
            for i in 0..damped.nrows() {
                // Guard against zero diagonal entries (unused parameters).
                let d = jtj[(i, i)].max(1e-30);
                damped[(i, i)] = jtj[(i, i)] + lambda * d;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= opts.lambda_grow;
                continue;
            };
            let delta = chol.solve(&(-&g));
            let candidate = &x + &delta;
            let r_new = problem.residuals(&candidate);
            let cost_new = check_finite(r_new.norm_squared(), iterations, &candidate)?;
            if cost_new <= cost {
                let rel_decrease = (cost - cost_new) / cost.max(f64::MIN_POSITIVE);
                x = candidate;
                cost = cost_new;
                trace.push(cost);
                lambda = (lambda * opts.lambda_shrink).max(1e-15);
                accepted = true;
                if rel_decrease < opts.tol {
                    converged = true;
                }
                break;
            }
            lambda *= opts.lambda_grow;
        }
        if !accepted {
            // Damping exhausted: no descent direction improves the cost.
            converged = true;
            break;
        }
        if converged {
            break;
        }
        let (r_next, jac_next) = problem.eval(&x);
        r = r_next;
        jac = jac_next;
    }

    Ok(GaussNewtonReport {
        x,
        cost_trace: trace,
        iterations,
        converged,
    })
}

fn check_finite(cost: f64, iteration: usize, x: &DVector<f64>) -> Result<f64> {
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::Solver(format!(
            "non-finite residual at iteration {iteration} (|x| = {:.3e})",
            x.norm()
        )))
    }
}
