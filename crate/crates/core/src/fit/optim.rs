//! Quasi-Newton minimizer used for maximum likelihood. BFGS on the inverse
//! Hessian with Armijo backtracking, central finite-difference gradients,
//! and an optional Nelder-Mead fallback when the line search stalls.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Objective value substituted when the likelihood cannot be evaluated.
pub const PENALTY: f64 = 1e10;

/// Longest move accepted in one iteration, max-norm in transformed
/// coordinates. The transforms put every packed parameter on a unit-ish
/// scale, so longer jumps are line-search artifacts; unchecked they can
/// strand an iterate on a saturated plateau (an atanh-mapped persistence
/// pinned at 1) where finite differences read a zero gradient.
const MAX_STEP_NORM: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Converged when the gradient's max-norm drops below this.
    pub grad_tol: f64,
    /// Converged when the relative objective change drops below this.
    pub rel_obj_tol: f64,
    /// Relative step for finite-difference gradients.
    pub fd_step: f64,
    pub nm_fallback: bool,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iters: 500,
            grad_tol: 1e-5,
            rel_obj_tol: 1e-10,
            fd_step: 1e-6,
            nm_fallback: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub used_fallback: bool,
    /// Accepted objective values, one per iteration, nonincreasing.
    pub trace: Vec<f64>,
}

type Objective<'a> = &'a (dyn Fn(&DVector<f64>) -> f64 + Sync);

/// Central differences with a per-coordinate step scaled to the iterate.
/// Components are computed in parallel but assembled by index, so the
/// result is identical to a sequential evaluation.
fn fd_gradient(f: Objective<'_>, x: &DVector<f64>, rel_step: f64) -> DVector<f64> {
    let n = x.len();
    let g: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect();
    DVector::from_vec(g)
}

struct LineSearch {
    x: DVector<f64>,
    f: f64,
}

/// Armijo backtracking along `dir`. Returns None when no step in 40
/// halvings produces sufficient decrease.
fn backtrack(
    f: Objective<'_>,
    x: &DVector<f64>,
    fx: f64,
    grad: &DVector<f64>,
    dir: &DVector<f64>,
) -> Option<LineSearch> {
    let slope = grad.dot(dir);
    if !(slope < 0.0) {
        return None;
    }
    let c1 = 1e-4;
    let mut alpha = (MAX_STEP_NORM / dir.amax()).min(1.0);
    for _ in 0..40 {
        let cand = x + dir * alpha;
        let fc = f(&cand);
        if fc.is_finite() && fc <= fx + c1 * alpha * slope {
            return Some(LineSearch { x: cand, f: fc });
        }
        alpha *= 0.5;
    }
    None
}

fn bfgs(f: Objective<'_>, x0: DVector<f64>, opts: &OptimOptions) -> (OptimOutcome, bool) {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut grad = fd_gradient(f, &x, opts.fd_step);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut trace = vec![fx];

    for iter in 0..opts.max_iters {
        if grad.amax() <= opts.grad_tol {
            return (
                OptimOutcome {
                    x,
                    f: fx,
                    iterations: iter,
                    converged: true,
                    used_fallback: false,
                    trace,
                },
                false,
            );
        }
        let mut dir = -(&h_inv * &grad);
        let mut step = backtrack(f, &x, fx, &grad, &dir);
        if step.is_none() {
            // Curvature information went bad; retry as plain steepest descent.
            h_inv = DMatrix::identity(n, n);
            dir = -grad.clone();
            step = backtrack(f, &x, fx, &grad, &dir);
        }
        let Some(ls) = step else {
            return (
                OptimOutcome {
                    x,
                    f: fx,
                    iterations: iter,
                    converged: false,
                    used_fallback: false,
                    trace,
                },
                true,
            );
        };

        let grad_new = fd_gradient(f, &ls.x, opts.fd_step);
        let s = &ls.x - &x;
        let y = &grad_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            // BFGS update of the inverse Hessian.
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let s_hy = &s * hy.transpose();
            h_inv += (sy + yhy) * rho * rho * (&s * s.transpose())
                - rho * (&s_hy + s_hy.transpose());
        } else {
            h_inv = DMatrix::identity(n, n);
        }

        let rel_change = (fx - ls.f).abs() / fx.abs().max(1.0);
        x = ls.x;
        fx = ls.f;
        grad = grad_new;
        trace.push(fx);
        if rel_change <= opts.rel_obj_tol {
            return (
                OptimOutcome {
                    x,
                    f: fx,
                    iterations: iter + 1,
                    converged: true,
                    used_fallback: false,
                    trace,
                },
                false,
            );
        }
    }
    (
        OptimOutcome {
            x,
            f: fx,
            iterations: opts.max_iters,
            converged: false,
            used_fallback: false,
            trace,
        },
        false,
    )
}

fn nelder_mead(f: Objective<'_>, x0: DVector<f64>, opts: &OptimOptions) -> OptimOutcome {
    let n = x0.len();
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = f(&x0);
    simplex.push((x0.clone(), f0));
    for i in 0..n {
        let mut v = x0.clone();
        v[i] += 0.05 * x0[i].abs().max(1.0);
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let mut trace = vec![f0];
    let mut best = f0;

    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..opts.max_iters * 4 {
        iterations = iter;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;
        if f_best < best {
            best = f_best;
            trace.push(f_best);
        }
        if (f_worst - f_best).abs() <= 1e-10 * (1.0 + f_best.abs()) {
            converged = true;
            break;
        }

        let mut centroid = DVector::zeros(n);
        for (v, _) in simplex.iter().take(n) {
            centroid += v;
        }
        centroid /= n as f64;

        let reflect = &centroid + (&centroid - &simplex[n].0);
        let f_ref = f(&reflect);
        if f_ref < simplex[0].1 {
            let expand = &centroid + (&reflect - &centroid) * 2.0;
            let f_exp = f(&expand);
            simplex[n] = if f_exp < f_ref {
                (expand, f_exp)
            } else {
                (reflect, f_ref)
            };
        } else if f_ref < simplex[n - 1].1 {
            simplex[n] = (reflect, f_ref);
        } else {
            let contract = &centroid + (&simplex[n].0 - &centroid) * 0.5;
            let f_con = f(&contract);
            if f_con < simplex[n].1 {
                simplex[n] = (contract, f_con);
            } else {
                let best_pt = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    entry.0 = &best_pt + (&entry.0 - &best_pt) * 0.5;
                    entry.1 = f(&entry.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (x, fx) = simplex.swap_remove(0);
    if *trace.last().unwrap() > fx {
        trace.push(fx);
    }
    OptimOutcome {
        x,
        f: fx,
        iterations,
        converged,
        used_fallback: true,
        trace,
    }
}

/// Minimizes `f` from `x0`. Runs BFGS first; if the line search stalls
/// before convergence and the fallback is enabled, polishes the current
/// iterate with Nelder-Mead.
pub fn minimize(f: Objective<'_>, x0: DVector<f64>, opts: &OptimOptions) -> OptimOutcome {
    if x0.is_empty() {
        let fx = f(&x0);
        return OptimOutcome {
            x: x0,
            f: fx,
            iterations: 0,
            converged: true,
            used_fallback: false,
            trace: vec![fx],
        };
    }
    let (bfgs_out, stalled) = bfgs(f, x0, opts);
    if bfgs_out.converged || !stalled || !opts.nm_fallback {
        return bfgs_out;
    }
    let mut nm = nelder_mead(f, bfgs_out.x.clone(), opts);
    if nm.f > bfgs_out.f {
        // Fallback failed to improve; keep the quasi-Newton iterate.
        nm.x = bfgs_out.x;
        nm.f = bfgs_out.f;
    }
    let mut trace = bfgs_out.trace;
    let mut last = *trace.last().unwrap();
    for v in nm.trace {
        if v < last {
            trace.push(v);
            last = v;
        }
    }
    OptimOutcome {
        x: nm.x,
        f: nm.f,
        iterations: bfgs_out.iterations + nm.iterations,
        converged: nm.converged,
        used_fallback: true,
        trace,
    }
}
