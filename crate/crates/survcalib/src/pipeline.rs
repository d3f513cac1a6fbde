//! End-to-end analysis methods shared by the CLI and the simulation engine:
//! naive GLM, outcome-error-only likelihood fit, covariate-error-only
//! correction and the combined (proposed) pipeline.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::calibration::{
    self, CalibrationError, CalibrationModel, CorrectionMatrix,
};
use crate::data::{CoefficientVector, Cohort, FollowUpMode, OutcomeErrorModel, SurvivalCurve};
use crate::glm::{self, CloglogFit, GlmError};
use crate::likelihood::{LikelihoodError, LikelihoodMode, LikelihoodSpec};
use crate::mle::{self, FitOptions, FitResult, MleError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("naive GLM failed: {0}")]
    Glm(#[from] GlmError),
    #[error("likelihood fit failed: {0}")]
    Mle(#[from] MleError),
    #[error("calibration failed: {0}")]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("fit did not converge: {0}")]
    NotConverged(String),
    #[error("covariance unavailable: {0}")]
    NoCovariance(String),
}

/// Analysis method, in the vocabulary of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// GLM on the data as given, treating outcomes and covariates as exact.
    Naive,
    /// Likelihood fit adjusting for outcome misclassification only.
    OutcomeOnly,
    /// Naive GLM plus the regression-calibration coefficient correction.
    CovariateOnly,
    /// Outcome-error likelihood fit plus the calibration correction.
    Proposed,
}

/// Point estimates and covariance for the coefficient block, with enough
/// metadata to report hazard ratios and diagnose the fit.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub method: Method,
    pub beta: Vec<f64>,
    pub beta_covariance: DMatrix<f64>,
    /// Baseline survival estimates per stratum (likelihood-based fits only).
    pub survival: Option<Vec<SurvivalCurve>>,
    pub loglik: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl MethodFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.beta.len())
            .map(|i| self.beta_covariance[(i, i)].max(0.0).sqrt())
            .collect()
    }
}

/// Chooses the likelihood variant for a cohort/error-model combination.
pub fn likelihood_mode(stratified: bool, err: &OutcomeErrorModel) -> LikelihoodMode {
    match (stratified, err.eta < 1.0) {
        (false, false) => LikelihoodMode::Standard,
        (true, false) => LikelihoodMode::Stratified,
        (false, true) => LikelihoodMode::NpvAdjusted,
        (true, true) => LikelihoodMode::StratifiedNpv,
    }
}

/// Person-period GLM on the data as given. Full-schedule cohorts are
/// truncated at each subject's first positive before expansion.
pub fn fit_naive_glm(cohort: &Cohort, stratified: bool) -> Result<CloglogFit, PipelineError> {
    let fit = if cohort.follow_up_mode() == FollowUpMode::FullSchedule {
        let truncated = cohort.truncated_at_first_positive();
        let table = glm::expand_person_period(&truncated)?;
        glm::fit_cloglog(&table, true, stratified)?
    } else {
        let table = glm::expand_person_period(cohort)?;
        glm::fit_cloglog(&table, true, stratified)?
    };
    Ok(fit)
}

pub fn naive_method_fit(cohort: &Cohort, stratified: bool) -> Result<MethodFit, PipelineError> {
    let fit = fit_naive_glm(cohort, stratified)?;
    if fit.separation {
        return Err(PipelineError::NotConverged(
            "naive GLM shows separation".into(),
        ));
    }
    Ok(MethodFit {
        method: Method::Naive,
        beta: fit.beta(),
        beta_covariance: fit.beta_covariance(),
        survival: None,
        loglik: None,
        converged: fit.converged,
        iterations: fit.iterations,
        warnings: Vec::new(),
    })
}

/// Maximum-likelihood fit adjusting for outcome misclassification, using the
/// naive GLM coefficients as starting values when available.
pub fn outcome_only_fit(
    cohort: &Cohort,
    err: &OutcomeErrorModel,
    stratified: bool,
    options: &FitOptions,
) -> Result<FitResult, PipelineError> {
    let mode = likelihood_mode(stratified, err);
    let spec = LikelihoodSpec::from_cohort(cohort, err, mode)?;
    let layout = spec.layout();
    let p = cohort.n_error_prone_covariates();
    let q = cohort.n_precise_covariates();
    let init_beta = match fit_naive_glm(cohort, stratified) {
        Ok(glm_fit) if !glm_fit.separation => CoefficientVector::from_slice(&glm_fit.beta(), p),
        _ => CoefficientVector::zeros(p, q),
    };
    let init_curves = mle::default_initial_curves(&layout);
    let fit = mle::fit(&spec, &init_beta, &init_curves, options)?;
    Ok(fit)
}

pub fn outcome_only_method_fit(
    cohort: &Cohort,
    err: &OutcomeErrorModel,
    stratified: bool,
    options: &FitOptions,
) -> Result<MethodFit, PipelineError> {
    let fit = outcome_only_fit(cohort, err, stratified, options)?;
    if !fit.converged {
        return Err(PipelineError::NotConverged(
            fit.warnings.last().cloned().unwrap_or_default(),
        ));
    }
    let cov = fit
        .beta_covariance
        .clone()
        .ok_or_else(|| PipelineError::NoCovariance("Hessian singular".into()))?;
    Ok(MethodFit {
        method: Method::OutcomeOnly,
        beta: fit.beta_hat.packed(),
        beta_covariance: cov,
        survival: Some(fit.survival_hat.clone()),
        loglik: Some(fit.loglik),
        converged: fit.converged,
        iterations: fit.iterations,
        warnings: fit.warnings,
    })
}

/// Applies the post-hoc correction and delta-method covariance to a fitted
/// coefficient block.
pub fn apply_correction(
    method: Method,
    beta_star: &[f64],
    sigma_beta_star: &DMatrix<f64>,
    calib: &CalibrationModel,
    survival: Option<Vec<SurvivalCurve>>,
    base: Option<&MethodFit>,
) -> Result<MethodFit, PipelineError> {
    let corr = CorrectionMatrix::from_calibration(calib)?;
    let beta_star_cv = CoefficientVector::from_slice(beta_star, calib.p);
    let corrected = calibration::correct_beta(&beta_star_cv, &corr)?;
    let cov = calibration::corrected_covariance(&beta_star_cv, sigma_beta_star, &corr, calib)?;
    Ok(MethodFit {
        method,
        beta: corrected.packed(),
        beta_covariance: cov,
        survival,
        loglik: base.and_then(|b| b.loglik),
        converged: base.map(|b| b.converged).unwrap_or(true),
        iterations: base.map(|b| b.iterations).unwrap_or(0),
        warnings: base.map(|b| b.warnings.clone()).unwrap_or_default(),
    })
}

/// Naive GLM corrected for covariate error only.
pub fn covariate_only_method_fit(
    cohort: &Cohort,
    calib: &CalibrationModel,
    stratified: bool,
) -> Result<MethodFit, PipelineError> {
    let naive = naive_method_fit(cohort, stratified)?;
    apply_correction(
        Method::CovariateOnly,
        &naive.beta,
        &naive.beta_covariance,
        calib,
        None,
        Some(&naive),
    )
}

/// The full pipeline: outcome-error likelihood fit, then the regression
/// calibration correction with delta-method covariance.
pub fn proposed_method_fit(
    cohort: &Cohort,
    err: &OutcomeErrorModel,
    calib: &CalibrationModel,
    stratified: bool,
    options: &FitOptions,
) -> Result<MethodFit, PipelineError> {
    let outcome = outcome_only_method_fit(cohort, err, stratified, options)?;
    apply_correction(
        Method::Proposed,
        &outcome.beta,
        &outcome.beta_covariance,
        calib,
        outcome.survival.clone(),
        Some(&outcome),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubjectRecord, TimeGrid};

    fn small_cohort() -> Cohort {
        let grid = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let mut subjects = Vec::new();
        for i in 0..120 {
            let x = ((i % 11) as f64 - 5.0) / 5.0;
            let z = ((i % 7) as f64 - 3.0) / 3.0;
            let y = match i % 6 {
                0 => vec![1],
                1 => vec![0, 1],
                2 => vec![0, 0, 1],
                _ => vec![0, 0, 0],
            };
            subjects.push(SubjectRecord {
                id: format!("s{i}"),
                t: (1..=y.len()).map(|k| k as f64).collect(),
                y,
                x_star: vec![x],
                z: vec![z],
                stratum: "all".into(),
                in_calibration_subset: i % 2 == 0,
                x_double_star: if i % 2 == 0 {
                    Some(vec![x * 0.9 + 0.05])
                } else {
                    None
                },
            });
        }
        Cohort::from_parts(grid, subjects, FollowUpMode::StopAfterFirstPositive)
    }

    #[test]
    fn proposed_composes_outcome_fit_and_correction() {
        let cohort = small_cohort();
        let err = OutcomeErrorModel::new(0.9, 0.95, 1.0).unwrap();
        let calib = crate::calibration::fit_calibration(&cohort).unwrap();
        let opts = FitOptions::default();
        let outcome = outcome_only_method_fit(&cohort, &err, false, &opts).unwrap();
        let proposed = proposed_method_fit(&cohort, &err, &calib, false, &opts).unwrap();
        let corr = CorrectionMatrix::from_calibration(&calib).unwrap();
        let manual = calibration::correct_beta(
            &CoefficientVector::from_slice(&outcome.beta, 1),
            &corr,
        )
        .unwrap();
        for (a, b) in proposed.beta.iter().zip(manual.packed()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn naive_and_covariate_only_share_glm() {
        let cohort = small_cohort();
        let calib = crate::calibration::fit_calibration(&cohort).unwrap();
        let naive = naive_method_fit(&cohort, false).unwrap();
        let cov_only = covariate_only_method_fit(&cohort, &calib, false).unwrap();
        // For p = 1 the corrected x coefficient is exactly naive / delta1.
        let d1 = calib.delta1[0][0];
        assert!((cov_only.beta[0] - naive.beta[0] / d1).abs() < 1e-12);
        assert_eq!(naive.beta.len(), cov_only.beta.len());
    }
}
