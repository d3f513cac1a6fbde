//! Discrete-time proportional hazards via person-period expansion and a
//! binomial GLM with complementary log-log link.
//!
//! Serves as the naive estimator on error-prone data, the reference estimator
//! on true data in simulations, and the source of starting values for the
//! likelihood fit. The intercept structure is one indicator per interval (or
//! per stratum-interval cell when stratified); `S_{j+1}/S_j =
//! exp(-exp(gamma_j))` maps intercepts back to baseline survival.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{Cohort, FollowUpMode};

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("person-period expansion requires stop-after-first-positive data")]
    ModeMismatch,
    #[error("empty person-period table")]
    EmptyTable,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("IRLS did not converge in {0} iterations")]
    NoConvergence(usize),
}

/// One at-risk interval for one subject.
#[derive(Debug, Clone)]
pub struct PersonPeriodRow {
    pub subject: usize,
    /// 0-based grid index of the visit closing the interval.
    pub interval: usize,
    pub stratum: usize,
    pub event: u8,
    pub covariates: Vec<f64>,
}

/// Expanded table: one row per observed at-risk interval, up to and including
/// the interval of the first positive (or censoring).
#[derive(Debug, Clone)]
pub struct PersonPeriodTable {
    pub rows: Vec<PersonPeriodRow>,
    pub n_covariates: usize,
    pub n_strata: usize,
}

/// Expands a stop-after-first-positive cohort. A subject whose first positive
/// is at their m-th visit contributes m rows with the last marked as the
/// event; a censored subject contributes one row per visit, all zero.
pub fn expand_person_period(cohort: &Cohort) -> Result<PersonPeriodTable, GlmError> {
    if cohort.follow_up_mode() != FollowUpMode::StopAfterFirstPositive {
        return Err(GlmError::ModeMismatch);
    }
    let mut rows = Vec::new();
    for (i, s) in cohort.subjects().iter().enumerate() {
        let idx = cohort.visit_indices(i);
        let mut covs = s.x_star.clone();
        covs.extend_from_slice(&s.z);
        for (k, &y) in s.y.iter().enumerate() {
            rows.push(PersonPeriodRow {
                subject: i,
                interval: idx[k],
                stratum: cohort.stratum_index(i),
                event: y,
                covariates: covs.clone(),
            });
            if y == 1 {
                break;
            }
        }
    }
    Ok(PersonPeriodTable {
        rows,
        n_covariates: cohort.n_error_prone_covariates() + cohort.n_precise_covariates(),
        n_strata: cohort.n_strata(),
    })
}

/// Fitted binomial GLM with complementary log-log link.
#[derive(Debug, Clone)]
pub struct CloglogFit {
    /// All coefficients: intercept cells first, covariates last.
    pub coefficients: DVector<f64>,
    /// Inverse expected information over all coefficients.
    pub covariance: DMatrix<f64>,
    /// (stratum, interval) for each intercept column, in column order.
    pub intercept_cells: Vec<(usize, usize)>,
    pub n_covariates: usize,
    pub deviance: f64,
    /// Deviance after each IRLS iteration.
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when any coefficient exceeds the separation guard.
    pub separation: bool,
}

impl CloglogFit {
    /// Covariate coefficients (the beta block).
    pub fn beta(&self) -> Vec<f64> {
        let k = self.intercept_cells.len();
        (k..k + self.n_covariates).map(|i| self.coefficients[i]).collect()
    }

    pub fn beta_covariance(&self) -> DMatrix<f64> {
        let k = self.intercept_cells.len();
        self.covariance
            .view((k, k), (self.n_covariates, self.n_covariates))
            .into_owned()
    }

    pub fn beta_standard_errors(&self) -> Vec<f64> {
        let c = self.beta_covariance();
        (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Conditional survival ratios implied by the intercepts:
    /// `S_{j+1}/S_j = exp(-exp(gamma_j))`, keyed by (stratum, interval).
    pub fn survival_ratios(&self) -> Vec<((usize, usize), f64)> {
        self.intercept_cells
            .iter()
            .enumerate()
            .map(|(c, &cell)| (cell, (-self.coefficients[c].exp()).exp()))
            .collect()
    }
}

const SEPARATION_GUARD: f64 = 15.0;
const DEVIANCE_TOL: f64 = 1e-10;
const MAX_IRLS_ITER: usize = 50;

/// Fits the GLM by iteratively reweighted least squares.
///
/// `interval_factors = false` replaces the per-interval indicators with a
/// single intercept (one column). `stratified` crosses interval indicators
/// with strata.
pub fn fit_cloglog(
    table: &PersonPeriodTable,
    interval_factors: bool,
    stratified: bool,
) -> Result<CloglogFit, GlmError> {
    if table.rows.is_empty() {
        return Err(GlmError::EmptyTable);
    }
    // Intercept cells present in the data, in sorted order.
    let mut cells: Vec<(usize, usize)> = table
        .rows
        .iter()
        .map(|r| {
            let s = if stratified { r.stratum } else { 0 };
            let j = if interval_factors { r.interval } else { 0 };
            (s, j)
        })
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let n_cells = cells.len();
    let n_cov = table.n_covariates;
    let k = n_cells + n_cov;
    let n = table.rows.len();

    let mut design = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    for (r, row) in table.rows.iter().enumerate() {
        let s = if stratified { row.stratum } else { 0 };
        let j = if interval_factors { row.interval } else { 0 };
        let c = cells.binary_search(&(s, j)).unwrap();
        design[(r, c)] = 1.0;
        for (a, &v) in row.covariates.iter().enumerate() {
            design[(r, n_cells + a)] = v;
        }
        y[r] = row.event as f64;
    }

    // cloglog link: mu = 1 - exp(-exp(lp)), dmu/dlp = exp(lp - exp(lp)).
    let mu_of = |lp: f64| -> f64 {
        let e = lp.clamp(-700.0, 30.0).exp();
        (1.0 - (-e).exp()).clamp(1e-12, 1.0 - 1e-12)
    };
    let dmu_of = |lp: f64| -> f64 {
        let lpc = lp.clamp(-700.0, 30.0);
        (lpc - lpc.exp()).exp().max(1e-300)
    };
    let deviance_of = |lp: &DVector<f64>| -> f64 {
        let mut dev = 0.0;
        for r in 0..n {
            let mu = mu_of(lp[r]);
            dev -= 2.0 * if y[r] == 1.0 { mu.ln() } else { (1.0 - mu).ln() };
        }
        dev
    };

    // Start from mu0 = (y + 0.5) / 2 pushed through the link.
    let mut lp = DVector::from_iterator(
        n,
        (0..n).map(|r| {
            let mu0: f64 = (y[r] + 0.5) / 2.0;
            (-(1.0 - mu0).ln()).ln()
        }),
    );
    let mut coef = DVector::zeros(k);
    let mut dev = deviance_of(&lp);
    let mut trace = Vec::new();
    let mut info = DMatrix::zeros(k, k);
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=MAX_IRLS_ITER {
        iterations = it;
        // Weighted least squares on the working response.
        let mut xtwx = DMatrix::zeros(k, k);
        let mut xtwz = DVector::zeros(k);
        for r in 0..n {
            let mu = mu_of(lp[r]);
            let dmu = dmu_of(lp[r]);
            let var = mu * (1.0 - mu);
            let w = dmu * dmu / var;
            let z = lp[r] + (y[r] - mu) / dmu;
            let row = design.row(r);
            for a in 0..k {
                let xa = row[a];
                if xa == 0.0 {
                    continue;
                }
                xtwz[a] += w * xa * z;
                for b in a..k {
                    xtwx[(a, b)] += w * xa * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        info = xtwx.clone();
        let chol = xtwx.cholesky().ok_or(GlmError::RankDeficient)?;
        coef = chol.solve(&xtwz);
        lp = &design * &coef;
        let dev_new = deviance_of(&lp);
        let rel = (dev - dev_new).abs() / (dev_new.abs() + 0.1);
        dev = dev_new;
        trace.push(dev_new);
        if rel < DEVIANCE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GlmError::NoConvergence(MAX_IRLS_ITER));
    }

    let covariance = info
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .or_else(|| info.lu().try_inverse())
        .ok_or(GlmError::RankDeficient)?;
    let separation = coef.iter().any(|c| c.abs() > SEPARATION_GUARD);

    Ok(CloglogFit {
        coefficients: coef,
        covariance,
        intercept_cells: cells,
        n_covariates: n_cov,
        deviance: dev,
        deviance_trace: trace,
        iterations,
        converged,
        separation,
    })
}
