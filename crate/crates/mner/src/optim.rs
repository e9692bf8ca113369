//! Quasi-Newton maximization with lower bounds.
//!
//! BFGS on the negated objective with box projection in the line search.
//! Convergence tests the projected gradient (components pointing into an
//! active lower bound are zeroed). Objective failures during the line search
//! (for example a trial point where a factorization breaks down) reject the
//! trial and backtrack; a failure at the starting point propagates.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

pub(crate) struct BoxBfgsOptions {
    pub max_iterations: usize,
    /// Projected-gradient tolerance, scaled by `1 + |f|`.
    pub grad_tol: f64,
    /// Step tolerance, scaled by `1 + |x|_inf`; two consecutive tiny steps stop.
    pub step_tol: f64,
}

pub(crate) struct OptimOutcome {
    pub x: Vec<f64>,
    /// Maximized objective value at `x`.
    pub value: f64,
    /// Projected gradient inf-norm at `x` (maximization sign).
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 45;
const CURVATURE_FLOOR: f64 = 1e-12;

fn project(x: &mut DVector<f64>, lower: &[f64]) {
    for i in 0..x.len() {
        if x[i] < lower[i] {
            x[i] = lower[i];
        }
    }
}

/// Gradient with blocked components removed (minimization sign: at an active
/// lower bound only increases are feasible, so positive components are inert).
fn projected_gradient(g: &DVector<f64>, x: &DVector<f64>, lower: &[f64]) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| {
        if x[i] <= lower[i] && g[i] > 0.0 {
            0.0
        } else {
            g[i]
        }
    })
}

/// Maximize `obj` subject to `x[i] >= lower[i]`.
///
/// `obj` returns the objective value and its gradient. The returned outcome
/// carries the best point found even when `converged` is false.
pub(crate) fn maximize_box_bfgs(
    obj: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    lower: &[f64],
    opts: &BoxBfgsOptions,
) -> Result<OptimOutcome> {
    assert_eq!(x0.len(), lower.len());
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    project(&mut x, lower);

    // minimize the negated objective
    let mut eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (v, g) = obj(x.as_slice())?;
        Ok((-v, -DVector::from_vec(g)))
    };

    let (mut f, mut g) = eval(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut tiny_steps = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    while iterations < opts.max_iterations {
        let pg = projected_gradient(&g, &x, lower);
        if pg.amax() <= opts.grad_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut d = -(&h * &g);
        if d.dot(&g) >= 0.0 {
            // stale curvature; fall back to steepest descent
            h = DMatrix::identity(n, n);
            h_is_identity = true;
            d = -g.clone();
        }

        // backtracking line search with box projection
        let mut alpha = 1.0f64;
        let mut accepted: Option<(DVector<f64>, f64, DVector<f64>)> = None;
        let noise = 4.0 * f64::EPSILON * (1.0 + f.abs());
        for _ in 0..MAX_BACKTRACKS {
            let mut xt = &x + d.scale(alpha);
            project(&mut xt, lower);
            let step = &xt - &x;
            if step.amax() == 0.0 {
                break;
            }
            let slope = g.dot(&step);
            if let Ok((ft, gt)) = eval(&xt) {
                if ft <= f + ARMIJO_C1 * slope.min(0.0) + noise {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let (xt, ft, gt) = match accepted {
            Some(t) => t,
            None if !h_is_identity => {
                // curvature model rejected every step; restart from gradient
                h = DMatrix::identity(n, n);
                h_is_identity = true;
                continue;
            }
            None => break,
        };

        let s = &xt - &x;
        let yv = &gt - &g;
        let sty = s.dot(&yv);
        if sty > CURVATURE_FLOOR * s.norm() * yv.norm() {
            // inverse-Hessian BFGS update
            let rho = 1.0 / sty;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            let shy = &s * hy.transpose();
            h = &h - (&shy + shy.transpose()).scale(rho)
                + (&s * s.transpose()).scale(rho * (1.0 + rho * yhy));
            h_is_identity = false;
        }

        let small = s.amax() <= opts.step_tol * (1.0 + x.amax());
        x = xt;
        f = ft;
        g = gt;
        if small {
            tiny_steps += 1;
            if tiny_steps >= 2 {
                let pg = projected_gradient(&g, &x, lower);
                converged = pg.amax() <= opts.grad_tol * (1.0 + f.abs());
                break;
            }
        } else {
            tiny_steps = 0;
        }
    }

    if !converged && iterations >= opts.max_iterations {
        // final point may still pass the gradient test
        let pg = projected_gradient(&g, &x, lower);
        converged = pg.amax() <= opts.grad_tol * (1.0 + f.abs());
    }

    let pg = projected_gradient(&g, &x, lower);
    Ok(OptimOutcome {
        x: x.as_slice().to_vec(),
        value: -f,
        grad_norm: pg.amax(),
        iterations,
        converged,
    })
}
