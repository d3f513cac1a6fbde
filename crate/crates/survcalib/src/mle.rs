//! Maximum-likelihood fitting of the misclassification-aware discrete
//! proportional hazards model.
//!
//! The objective is maximized over the transformed survival parameters and
//! `beta` under the box constraints from [`crate::param`]; the covariance is
//! the inverse of the negative Hessian at the optimum, obtained by central
//! finite differences of the analytic gradient.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{CoefficientVector, SurvivalCurve};
use crate::lbfgsb::{self, LbfgsbOptions};
use crate::likelihood::{eval_packed, LikelihoodError, LikelihoodSpec};
use crate::param::{self, ParamLayout};

pub use crate::param::{dereparameterize, reparameterize};

#[derive(Debug, Error)]
pub enum MleError {
    #[error("starting point is infeasible: {0}")]
    InfeasibleStart(String),
    #[error("Hessian is singular; covariance unavailable")]
    SingularHessian,
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Param(#[from] param::ParamError),
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Projected-gradient infinity-norm tolerance.
    pub tol_g: f64,
    pub max_iter: usize,
    /// Correction pairs kept by the quasi-Newton update.
    pub history: usize,
    /// Relative step for the finite-difference Hessian.
    pub fd_step: f64,
    /// Skip the Hessian/covariance computation (simulation fast paths that
    /// only need point estimates).
    pub compute_covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol_g: 1e-6,
            max_iter: 500,
            history: 10,
            fd_step: 1e-5,
            compute_covariance: true,
        }
    }
}

/// Fitted model: estimates, covariance and convergence metadata.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: CoefficientVector,
    /// One curve per stratum, in stratum-label order.
    pub survival_hat: Vec<SurvivalCurve>,
    /// Covariance over all free parameters (phi blocks then beta); absent when
    /// the Hessian is singular.
    pub covariance: Option<DMatrix<f64>>,
    /// The (p+q) x (p+q) beta block of `covariance`.
    pub beta_covariance: Option<DMatrix<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n_evaluations: usize,
    pub warnings: Vec<String>,
    pub layout: ParamLayout,
    /// Optimum in packed (phi, beta) coordinates.
    pub packed: Vec<f64>,
}

impl FitResult {
    pub fn beta_standard_errors(&self) -> Option<Vec<f64>> {
        self.beta_covariance
            .as_ref()
            .map(|c| (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect())
    }
}

/// Default starting survival parameters: 0.1 for every transformed
/// coordinate. When the first survival value is free (baseline-NPV model) its
/// chain head starts near S_1 = 0.999; the likelihood is monotone in S_1, so
/// its maximizer sits at the boundary and a distant start just wastes
/// iterations crawling toward it.
pub fn default_initial_curves(layout: &ParamLayout) -> Vec<SurvivalCurve> {
    (0..layout.n_strata)
        .map(|_| {
            let mut phi = vec![0.1; layout.phi_per_stratum()];
            if layout.s1_free {
                phi[0] = -6.9;
            }
            dereparameterize(&phi, layout.s1_free)
        })
        .collect()
}

/// Maximizes the log-likelihood from the given start.
///
/// A non-converged run (iteration cap) still returns the best point with
/// `converged = false`; a singular Hessian retains the fit and drops the
/// covariance with a warning.
pub fn fit(
    spec: &LikelihoodSpec,
    init_beta: &CoefficientVector,
    init_curves: &[SurvivalCurve],
    options: &FitOptions,
) -> Result<FitResult, MleError> {
    let layout = spec.layout();
    let x0 = layout
        .pack(init_curves, &init_beta.packed())
        .map_err(|e| MleError::InfeasibleStart(e.to_string()))?;
    let lower = layout.lower_bounds();
    let upper = layout.upper_bounds();

    let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        match eval_packed(spec, &layout, x, true) {
            Ok((f, Some(g))) => {
                if f.is_finite() {
                    Some((-f, g.iter().map(|v| -v).collect()))
                } else {
                    None
                }
            }
            _ => None,
        }
    };

    let opts = LbfgsbOptions {
        history: options.history,
        tol_g: options.tol_g,
        max_iter: options.max_iter,
    };
    let mut res = lbfgsb::minimize(objective, &x0, &lower, &upper, &opts)
        .map_err(|e| MleError::InfeasibleStart(e.to_string()))?;

    // Quasi-Newton occasionally stalls on ill-conditioned instances with the
    // gradient close to tolerance; a Newton refinement with the exact
    // finite-difference Hessian finishes the job.
    if !res.converged && res.projected_gradient_norm <= 1e-2 {
        if let Some((x, f, pg)) =
            newton_polish(spec, &layout, &res.x, options.fd_step, options.tol_g)
        {
            res.x = x;
            res.f = -f;
            res.projected_gradient_norm = pg;
            if pg <= options.tol_g {
                res.converged = true;
                res.message = "projected gradient within tolerance (Newton refinement)".into();
            }
        }
    }

    let (curves, beta) = layout.unpack(&res.x)?;
    let p = spec.n_error_prone();
    let mut warnings = Vec::new();
    for (k, curve) in curves.iter().enumerate() {
        let masses = curve.interval_masses();
        for (j, &m) in masses.iter().enumerate() {
            if m < 1e-10 {
                warnings.push(format!(
                    "stratum {k}: interval {} carries no probability mass (boundary solution)",
                    j + 1
                ));
            }
        }
    }
    if !res.converged {
        warnings.push(format!("optimizer stopped early: {}", res.message));
    }

    let (covariance, beta_covariance) = if options.compute_covariance && res.converged {
        match covariance_from_hessian(spec, &layout, &res.x, options.fd_step) {
            Ok(cov) => {
                let br = layout.beta_range();
                let bc = cov.view((br.start, br.start), (br.len(), br.len())).into_owned();
                (Some(cov), Some(bc))
            }
            Err(MleError::SingularHessian) => {
                warnings.push("Hessian singular at the optimum; covariance unavailable".into());
                (None, None)
            }
            Err(e) => return Err(e),
        }
    } else {
        (None, None)
    };

    Ok(FitResult {
        beta_hat: CoefficientVector::from_slice(&beta, p),
        survival_hat: curves,
        covariance,
        beta_covariance,
        loglik: -res.f,
        converged: res.converged,
        iterations: res.iterations,
        gradient_norm: res.projected_gradient_norm,
        n_evaluations: res.n_evals,
        warnings,
        layout,
        packed: res.x,
    })
}

/// Symmetrized Hessian of a function by central finite differences of its
/// gradient (step `fd_step * max(1, |param|)` per coordinate).
pub fn fd_hessian_of<G>(grad_at: G, x: &[f64], fd_step: f64) -> Result<DMatrix<f64>, MleError>
where
    G: Fn(&[f64]) -> Result<DVector<f64>, MleError>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for b in 0..n {
        let step = fd_step * x[b].abs().max(1.0);
        xp[b] = x[b] + step;
        let gp = grad_at(&xp)?;
        xp[b] = x[b] - step;
        let gm = grad_at(&xp)?;
        xp[b] = x[b];
        for a in 0..n {
            h[(a, b)] = (gp[a] - gm[a]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// [`fd_hessian_of`] applied to the log-likelihood's analytic gradient.
pub fn fd_hessian(
    spec: &LikelihoodSpec,
    layout: &ParamLayout,
    x: &[f64],
    fd_step: f64,
) -> Result<DMatrix<f64>, MleError> {
    fd_hessian_of(
        |xp| {
            let (_, g) = eval_packed(spec, layout, xp, true)?;
            Ok(DVector::from_vec(g.unwrap()))
        },
        x,
        fd_step,
    )
}

/// Inverse of the negative log-likelihood Hessian at `x` (observed
/// information), with the Hessian from [`fd_hessian`].
pub fn covariance_from_hessian(
    spec: &LikelihoodSpec,
    layout: &ParamLayout,
    x: &[f64],
    fd_step: f64,
) -> Result<DMatrix<f64>, MleError> {
    let info = fd_hessian(spec, layout, x, fd_step)? * -1.0;
    let cov = info.lu().try_inverse().ok_or(MleError::SingularHessian)?;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(MleError::SingularHessian);
    }
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Infinity norm of the projected ascent direction for a maximization
/// problem: at-bound coordinates pushed outward contribute zero.
fn projected_ascent_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&li, &ui))| ((xi + gi).clamp(li, ui) - xi).abs())
        .fold(0.0, f64::max)
}

/// Newton refinement from a near-converged point: solves the full Newton
/// system on the free coordinate set with the finite-difference Hessian,
/// projecting onto the bounds and backtracking on the objective. Returns the
/// improved point when it reduces the projected gradient.
fn newton_polish(
    spec: &LikelihoodSpec,
    layout: &ParamLayout,
    x0: &[f64],
    fd_step: f64,
    tol_g: f64,
) -> Option<(Vec<f64>, f64, f64)> {
    let lower = layout.lower_bounds();
    let upper = layout.upper_bounds();
    let mut x = x0.to_vec();
    let (mut f, g) = match eval_packed(spec, layout, &x, true) {
        Ok((f, Some(g))) => (f, g),
        _ => return None,
    };
    let mut g = DVector::from_vec(g);
    let mut pg = projected_ascent_norm(&x, g.as_slice(), &lower, &upper);
    let pg0 = pg;

    for _ in 0..3 {
        if pg <= tol_g {
            break;
        }
        let h = fd_hessian(spec, layout, &x, fd_step).ok()?;
        // Free set: coordinates off their bounds or pushed inwards.
        let free: Vec<usize> = (0..x.len())
            .filter(|&i| x[i] > lower[i] + 1e-12 || g[i] > 0.0)
            .collect();
        if free.is_empty() {
            break;
        }
        let nf = free.len();
        let mut hff = DMatrix::zeros(nf, nf);
        let mut gf = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            gf[a] = g[i];
            for (b, &j) in free.iter().enumerate() {
                hff[(a, b)] = -h[(i, j)];
            }
        }
        let scale = (0..nf).map(|a| hff[(a, a)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut improved = false;
        'damping: for damping in [0.0, 1e-8, 1e-5, 1e-2] {
            let damped = &hff + DMatrix::identity(nf, nf) * (damping * scale);
            let Some(step) = damped.lu().solve(&gf) else {
                continue;
            };
            let mut alpha = 1.0;
            for _ in 0..6 {
                let mut xt = x.clone();
                for (a, &i) in free.iter().enumerate() {
                    xt[i] = (x[i] + alpha * step[a]).clamp(lower[i], upper[i]);
                }
                if let Ok((ft, Some(gt))) = eval_packed(spec, layout, &xt, true) {
                    let gt = DVector::from_vec(gt);
                    let pgt = projected_ascent_norm(&xt, gt.as_slice(), &lower, &upper);
                    if pgt < pg && ft >= f - 1e-9 * f.abs().max(1.0) {
                        x = xt;
                        f = ft;
                        g = gt;
                        pg = pgt;
                        improved = true;
                        break 'damping;
                    }
                }
                alpha *= 0.25;
            }
        }
        if !improved {
            break;
        }
    }
    if pg < pg0 {
        Some((x, f, pg))
    } else {
        None
    }
}
