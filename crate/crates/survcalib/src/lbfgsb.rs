//! Bound-constrained limited-memory quasi-Newton minimizer.
//!
//! Follows the classic structure: generalized Cauchy point along the projected
//! steepest-descent path, subspace minimization over the free variables, and a
//! strong-Wolfe line search. The quadratic model uses the compact limited-memory
//! representation `B = theta*I - W * Mid^-1 * W'`; since the problems here have
//! few parameters, `B` is materialized densely, which keeps the Cauchy-point
//! and subspace steps simple.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("objective not evaluable at the starting point")]
    InfeasibleStart,
    #[error("bounds are inconsistent (lower > upper at index {0})")]
    BadBounds(usize),
}

#[derive(Debug, Clone)]
pub struct LbfgsbOptions {
    /// Number of correction pairs retained.
    pub history: usize,
    /// Convergence threshold on the infinity norm of the projected gradient.
    pub tol_g: f64,
    pub max_iter: usize,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        Self {
            history: 10,
            tol_g: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub n_evals: usize,
    /// Projected-gradient infinity norm at the returned point.
    pub projected_gradient_norm: f64,
    pub converged: bool,
    pub message: String,
}

/// Minimizes `f` over the box `[lower, upper]`. The objective returns `None`
/// at points where it cannot be evaluated (treated as +infinity by the line
/// search, which then backs off).
pub fn minimize<F>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LbfgsbOptions,
) -> Result<OptimResult, OptimError>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    for i in 0..n {
        if lower[i] > upper[i] {
            return Err(OptimError::BadBounds(i));
        }
    }
    let clip = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };

    let mut x = x0.to_vec();
    clip(&mut x);
    let mut n_evals = 1usize;
    let (mut f, mut g) = objective(&x).ok_or(OptimError::InfeasibleStart)?;

    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut theta = 1.0;
    let mut restarted = false;

    let mut iterations = 0;
    let mut message = String::from("max iterations reached");
    let mut converged = false;
    let mut stalled = 0usize;
    let mut pg_prev = f64::INFINITY;

    while iterations < opts.max_iter {
        let pg = projected_gradient_norm(&x, &g, lower, upper);
        if pg <= opts.tol_g {
            converged = true;
            message = "projected gradient within tolerance".into();
            break;
        }
        iterations += 1;

        let b = build_dense_b(n, theta, &s_hist, &y_hist);
        let (x_cp, free) = cauchy_point(&x, &g, &b, lower, upper);
        let x_bar = subspace_minimize(&x, &g, &b, &x_cp, &free, lower, upper);

        let mut d: Vec<f64> = (0..n).map(|i| x_bar[i] - x[i]).collect();
        let mut g0d: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(g0d < 0.0) {
            // Model direction failed; fall back to the projected gradient step.
            for i in 0..n {
                d[i] = (x[i] - g[i]).clamp(lower[i], upper[i]) - x[i];
            }
            g0d = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(g0d < 0.0) {
                message = "no descent direction".into();
                break;
            }
        }

        let alpha_max = max_feasible_step(&x, &d, lower, upper);
        // Without curvature pairs the model is a unit quadratic and the raw
        // step is gradient-sized; start the search at a unit-length step.
        let alpha_init = if s_hist.is_empty() {
            let d_norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            (1.0 / d_norm.max(1.0)).min(alpha_max)
        } else {
            1.0_f64.min(alpha_max)
        };
        let ls = strong_wolfe(
            &mut objective,
            &x,
            &d,
            f,
            g0d,
            alpha_init,
            alpha_max,
            lower,
            upper,
            &mut n_evals,
        );
        match ls {
            Some((x_new, f_new, g_new)) => {
                let s: DVector<f64> =
                    DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
                let yv: DVector<f64> =
                    DVector::from_iterator(n, g_new.iter().zip(&g).map(|(a, b)| a - b));
                let sy = s.dot(&yv);
                if sy > 1e-10 * s.norm() * yv.norm() {
                    s_hist.push(s);
                    y_hist.push(yv.clone());
                    if s_hist.len() > opts.history {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    theta = yv.dot(&yv) / sy;
                }
                let f_drop = (f - f_new).abs();
                x = x_new;
                f = f_new;
                g = g_new;
                restarted = false;
                // Stop only once the objective is pinned at machine
                // resolution and the gradient has stopped shrinking too;
                // while the gradient keeps dropping the search is still
                // polishing on curvature evidence.
                let pg_now = projected_gradient_norm(&x, &g, lower, upper);
                if f_drop <= 4.0 * f64::EPSILON * f.abs().max(1.0) && pg_now >= 0.999 * pg_prev {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                pg_prev = pg_now;
                if stalled >= 5 {
                    let pg = projected_gradient_norm(&x, &g, lower, upper);
                    if pg <= opts.tol_g {
                        converged = true;
                        message = "projected gradient within tolerance".into();
                    } else {
                        message = "function change below tolerance".into();
                    }
                    break;
                }
            }
            None => {
                if !restarted && !s_hist.is_empty() {
                    // Memory may be stale; retry from a fresh steepest-descent model.
                    s_hist.clear();
                    y_hist.clear();
                    theta = 1.0;
                    restarted = true;
                    continue;
                }
                message = "line search failed".into();
                break;
            }
        }
    }

    let projected = projected_gradient_norm(&x, &g, lower, upper);
    if !converged && projected <= opts.tol_g {
        converged = true;
        message = "projected gradient within tolerance".into();
    }
    Ok(OptimResult {
        x,
        f,
        grad: g,
        iterations,
        n_evals,
        projected_gradient_norm: projected,
        converged,
        message,
    })
}

pub fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&li, &ui))| ((xi - gi).clamp(li, ui) - xi).abs())
        .fold(0.0, f64::max)
}

/// Dense quadratic-model Hessian from the compact limited-memory form.
fn build_dense_b(n: usize, theta: f64, s_hist: &[DVector<f64>], y_hist: &[DVector<f64>]) -> DMatrix<f64> {
    let k = s_hist.len();
    if k == 0 {
        return DMatrix::identity(n, n) * theta;
    }
    let mut w = DMatrix::zeros(n, 2 * k);
    for (j, y) in y_hist.iter().enumerate() {
        w.column_mut(j).copy_from(y);
    }
    for (j, s) in s_hist.iter().enumerate() {
        w.column_mut(k + j).copy_from(&(s * theta));
    }
    let mut mid = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        mid[(i, i)] = -s_hist[i].dot(&y_hist[i]);
        for j in 0..k {
            if i > j {
                let l = s_hist[i].dot(&y_hist[j]);
                mid[(k + i, j)] = l;
                mid[(j, k + i)] = l;
            }
            mid[(k + i, k + j)] = theta * s_hist[i].dot(&s_hist[j]);
        }
    }
    match mid.lu().try_inverse() {
        Some(mid_inv) => DMatrix::identity(n, n) * theta - &w * mid_inv * w.transpose(),
        None => DMatrix::identity(n, n) * theta,
    }
}

/// Generalized Cauchy point: first local minimizer of the quadratic model
/// along the projected steepest-descent path. Returns the point and the mask
/// of variables still free there.
fn cauchy_point(
    x: &[f64],
    g: &[f64],
    b: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
) -> (Vec<f64>, Vec<bool>) {
    let n = x.len();
    let mut t_break = vec![f64::INFINITY; n];
    let mut d = DVector::zeros(n);
    for i in 0..n {
        if g[i] < 0.0 && upper[i].is_finite() {
            t_break[i] = (x[i] - upper[i]) / g[i];
        } else if g[i] > 0.0 && lower[i].is_finite() {
            t_break[i] = (x[i] - lower[i]) / g[i];
        }
        if t_break[i] > 0.0 {
            d[i] = -g[i];
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| t_break[i].is_finite()).collect();
    order.sort_by(|&a, &b| t_break[a].partial_cmp(&t_break[b]).unwrap());

    let g_vec = DVector::from_column_slice(g);
    let mut z = DVector::zeros(n);
    let mut frozen = vec![false; n];
    for i in 0..n {
        if t_break[i] == 0.0 {
            frozen[i] = true;
        }
    }
    let mut t_old = 0.0;
    let mut pos = 0;
    let t_star = loop {
        // Segment derivative recomputed directly; n is small.
        let bd = b * &d;
        let fp = g_vec.dot(&d) + z.dot(&bd);
        if fp >= 0.0 {
            break t_old;
        }
        let fpp = d.dot(&bd);
        let dt_star = if fpp > 1e-300 { -fp / fpp } else { f64::INFINITY };

        // Next breakpoint strictly beyond t_old.
        let mut t_next = f64::INFINITY;
        while pos < order.len() {
            let t = t_break[order[pos]];
            if t > t_old {
                t_next = t;
                break;
            }
            pos += 1;
        }

        if t_old + dt_star < t_next {
            break t_old + dt_star;
        }
        if !t_next.is_finite() {
            break if dt_star.is_finite() { t_old + dt_star } else { t_old };
        }
        z += &d * (t_next - t_old);
        for &i in &order[pos..] {
            if t_break[i] <= t_next {
                frozen[i] = true;
                d[i] = 0.0;
            }
        }
        t_old = t_next;
    };

    let mut x_cp = vec![0.0; n];
    for i in 0..n {
        let step = if frozen[i] {
            z[i]
        } else {
            z[i] + (t_star - t_old) * d[i]
        };
        x_cp[i] = (x[i] + step).clamp(lower[i], upper[i]);
    }
    let free: Vec<bool> = (0..n)
        .map(|i| x_cp[i] > lower[i] && x_cp[i] < upper[i])
        .collect();
    (x_cp, free)
}

/// Minimizes the quadratic model over the free variables, holding the rest at
/// the Cauchy point, then backtracks into the box.
fn subspace_minimize(
    x: &[f64],
    g: &[f64],
    b: &DMatrix<f64>,
    x_cp: &[f64],
    free: &[bool],
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let n = x.len();
    let free_idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    if free_idx.is_empty() {
        return x_cp.to_vec();
    }
    let z_cp = DVector::from_iterator(n, (0..n).map(|i| x_cp[i] - x[i]));
    let model_grad = DVector::from_column_slice(g) + b * &z_cp;
    let nf = free_idx.len();
    let mut bff = DMatrix::zeros(nf, nf);
    let mut rhs = DVector::zeros(nf);
    for (a, &i) in free_idx.iter().enumerate() {
        rhs[a] = -model_grad[i];
        for (c, &j) in free_idx.iter().enumerate() {
            bff[(a, c)] = b[(i, j)];
        }
    }
    let du = bff
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| bff.lu().solve(&rhs))
        .unwrap_or(rhs);

    // Largest alpha in (0, 1] keeping the free block inside the box.
    let mut alpha: f64 = 1.0;
    for (a, &i) in free_idx.iter().enumerate() {
        if du[a] > 0.0 && upper[i].is_finite() {
            alpha = alpha.min((upper[i] - x_cp[i]) / du[a]);
        } else if du[a] < 0.0 && lower[i].is_finite() {
            alpha = alpha.min((lower[i] - x_cp[i]) / du[a]);
        }
    }
    alpha = alpha.max(0.0);
    let mut out = x_cp.to_vec();
    for (a, &i) in free_idx.iter().enumerate() {
        out[i] = (x_cp[i] + alpha * du[a]).clamp(lower[i], upper[i]);
    }
    out
}

fn max_feasible_step(x: &[f64], d: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut a_max = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 && upper[i].is_finite() {
            a_max = a_max.min((upper[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 && lower[i].is_finite() {
            a_max = a_max.min((lower[i] - x[i]) / d[i]);
        }
    }
    a_max.max(1.0)
}

const LS_C1: f64 = 1e-4;
const LS_C2: f64 = 0.9;
/// Relative slack on the sufficient-decrease test. Near the optimum the true
/// decrease per step falls below the floating-point resolution of `f`; the
/// slack lets the search keep polishing on gradient evidence (approximate
/// Wolfe conditions).
const LS_EPS_F: f64 = 1e-12;

struct LineSearchCtx<'a> {
    x: &'a [f64],
    d: &'a [f64],
    lower: &'a [f64],
    upper: &'a [f64],
    f0: f64,
    g0d: f64,
    eps_f: f64,
}

fn ls_eval<F>(
    objective: &mut F,
    ctx: &LineSearchCtx<'_>,
    alpha: f64,
    n_evals: &mut usize,
) -> Option<(Vec<f64>, f64, Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let xt: Vec<f64> = (0..ctx.x.len())
        .map(|i| (ctx.x[i] + alpha * ctx.d[i]).clamp(ctx.lower[i], ctx.upper[i]))
        .collect();
    *n_evals += 1;
    objective(&xt).map(|(f, g)| {
        let dphi = g.iter().zip(ctx.d).map(|(a, b)| a * b).sum();
        (xt, f, g, dphi)
    })
}

fn ls_zoom<F>(
    objective: &mut F,
    ctx: &LineSearchCtx<'_>,
    mut a_lo: f64,
    mut a_hi: f64,
    mut f_lo: f64,
    n_evals: &mut usize,
) -> Option<(Vec<f64>, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    for _ in 0..40 {
        if (a_hi - a_lo).abs() <= 1e-15 * a_lo.abs().max(1.0) {
            break;
        }
        let a = 0.5 * (a_lo + a_hi);
        match ls_eval(objective, ctx, a, n_evals) {
            None => {
                a_hi = a;
            }
            Some((xt, fa, ga, dphi)) => {
                if fa > ctx.f0 + LS_C1 * a * ctx.g0d + ctx.eps_f || fa >= f_lo + ctx.eps_f {
                    a_hi = a;
                } else {
                    if dphi.abs() <= -LS_C2 * ctx.g0d {
                        return Some((xt, fa, ga));
                    }
                    if dphi * (a_hi - a_lo) >= 0.0 {
                        a_hi = a_lo;
                    }
                    a_lo = a;
                    f_lo = fa;
                    best = Some((xt, fa, ga));
                }
            }
        }
    }
    best.filter(|(_, fb, _)| *fb <= ctx.f0 + ctx.eps_f)
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    objective: &mut F,
    x: &[f64],
    d: &[f64],
    f0: f64,
    g0d: f64,
    alpha_init: f64,
    alpha_max: f64,
    lower: &[f64],
    upper: &[f64],
    n_evals: &mut usize,
) -> Option<(Vec<f64>, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let ctx = LineSearchCtx {
        x,
        d,
        lower,
        upper,
        f0,
        g0d,
        eps_f: LS_EPS_F * f0.abs().max(1.0),
    };
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = alpha_init.min(alpha_max).max(f64::MIN_POSITIVE);
    for iter in 0..30 {
        match ls_eval(objective, &ctx, alpha, n_evals) {
            None => return ls_zoom(objective, &ctx, alpha_prev, alpha, f_prev, n_evals),
            Some((xt, fa, ga, dphi)) => {
                if fa > f0 + LS_C1 * alpha * g0d + ctx.eps_f || (iter > 0 && fa >= f_prev + ctx.eps_f)
                {
                    return ls_zoom(objective, &ctx, alpha_prev, alpha, f_prev, n_evals);
                }
                if dphi.abs() <= -LS_C2 * g0d {
                    return Some((xt, fa, ga));
                }
                if dphi >= 0.0 {
                    return ls_zoom(objective, &ctx, alpha, alpha_prev, fa, n_evals);
                }
                if alpha >= alpha_max * (1.0 - 1e-12) {
                    // Boundary step: sufficient decrease held, curvature cannot.
                    return Some((xt, fa, ga));
                }
                alpha_prev = alpha;
                f_prev = fa;
                alpha = (2.0 * alpha).min(alpha_max);
            }
        }
    }
    None
}
