//! Box-constrained Levenberg–Marquardt for small dense problems.
//!
//! Minimizes `Σ r_i(θ)²` with Marquardt diagonal scaling. Steps that leave
//! the feasible box are projected back onto it before the trial evaluation.

use serde::{Deserialize, Serialize};

use crate::linalg::solve_dense;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iter: usize,
    /// Relative step-norm threshold for convergence.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { lambda0: 1e-3, lambda_up: 10.0, lambda_down: 10.0, max_iter: 200, tol: 1e-10 }
    }
}

pub trait LeastSquares<T: Scalar> {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, theta: &[T], out: &mut [T]);
    /// Row-major `n_residuals × n_params`.
    fn jacobian(&self, theta: &[T], out: &mut [T]);
    /// Clamp `theta` onto the feasible set.
    fn project(&self, theta: &mut [T]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmOutcome {
    Converged,
    MaxIterations,
    /// The damped normal equations could not be solved.
    RankDeficient,
}

#[derive(Debug, Clone)]
pub struct LmReport<T> {
    pub theta: Vec<T>,
    pub sse: T,
    pub iterations: usize,
    pub outcome: LmOutcome,
}

fn sse<T: Scalar>(r: &[T]) -> T {
    r.iter().map(|&v| v * v).sum()
}

pub fn minimize<T: Scalar, P: LeastSquares<T>>(problem: &P, init: &[T], opts: &FitOptions) -> LmReport<T> {
    let np = problem.n_params();
    let nr = problem.n_residuals();
    let mut theta = init.to_vec();
    problem.project(&mut theta);

    let mut r = vec![T::zero(); nr];
    let mut jac = vec![T::zero(); nr * np];
    let mut trial = vec![T::zero(); np];
    let mut r_trial = vec![T::zero(); nr];
    problem.residuals(&theta, &mut r);
    let mut cost = sse(&r);
    let mut lambda = T::lit(opts.lambda0);
    let up = T::lit(opts.lambda_up);
    let down = T::lit(opts.lambda_down);
    let tol = T::lit(opts.tol);
    // exact fits stop here instead of chasing round-off
    let data_scale: T = problem_scale(&r, cost);
    let eps_floor = T::lit(1e-12);

    let mut iterations = 0;
    let mut outcome = LmOutcome::MaxIterations;
    'outer: while iterations < opts.max_iter {
        iterations += 1;
        if cost <= T::lit(1e-30) * data_scale {
            outcome = LmOutcome::Converged;
            break;
        }
        problem.jacobian(&theta, &mut jac);
        let mut jtj = vec![T::zero(); np * np];
        let mut jtr = vec![T::zero(); np];
        for i in 0..nr {
            let row = &jac[i * np..(i + 1) * np];
            for a in 0..np {
                jtr[a] += row[a] * r[i];
                for b in a..np {
                    jtj[a * np + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtj[a * np + b] = jtj[b * np + a];
            }
        }
        let max_diag = (0..np).fold(T::zero(), |m, i| m.max(jtj[i * np + i]));
        if !(max_diag > T::zero()) {
            outcome = LmOutcome::RankDeficient;
            break;
        }

        // inner loop: raise damping until a step reduces the cost
        loop {
            let mut m = jtj.clone();
            for i in 0..np {
                let d = jtj[i * np + i].max(eps_floor * max_diag);
                m[i * np + i] += lambda * d;
            }
            let mut step: Vec<T> = jtr.iter().map(|&v| -v).collect();
            if solve_dense(&mut m, &mut step, T::zero()).is_err() {
                outcome = LmOutcome::RankDeficient;
                break 'outer;
            }
            for i in 0..np {
                trial[i] = theta[i] + step[i];
            }
            problem.project(&mut trial);
            problem.residuals(&trial, &mut r_trial);
            let trial_cost = sse(&r_trial);

            let rel_step = (0..np).fold(T::zero(), |m, i| {
                let denom = theta[i].abs().max(T::lit(1e-8));
                m.max((trial[i] - theta[i]).abs() / denom)
            });

            if trial_cost.is_finite() && trial_cost <= cost {
                let improved = trial_cost < cost;
                theta.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut r_trial);
                cost = trial_cost;
                lambda = (lambda / down).max(T::lit(1e-15));
                if rel_step < tol || !improved {
                    outcome = LmOutcome::Converged;
                    break 'outer;
                }
                break;
            }
            lambda *= up;
            if rel_step < tol || lambda > T::lit(1e16) {
                // no descent possible at any damping: stationary point
                outcome = LmOutcome::Converged;
                break 'outer;
            }
        }
    }
    LmReport { theta, sse: cost, iterations, outcome }
}

fn problem_scale<T: Scalar>(r: &[T], cost: T) -> T {
    let n = T::from_usize_lossy(r.len().max(1));
    (cost / n).max(T::one())
}
