//! Regression calibration for covariate measurement error.
//!
//! The calibration model regresses the reference measure X** on (1, X*, Z)
//! over the calibration subset. Its non-intercept coefficients form the block
//! correction matrix `Delta = [[delta1, delta2], [0, I]]`; the post-hoc
//! corrected coefficients are `beta = beta* . Delta^-1` and the corrected
//! covariance adds a term propagating the uncertainty in Delta via the
//! delta method.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cohort, CoefficientVector};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration subset too small: {n_c} rows for {k} coefficients")]
    SubsetTooSmall { n_c: usize, k: usize },
    #[error("calibration design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("correction matrix is singular (delta1 not invertible)")]
    SingularDelta,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Fitted calibration regression and the covariance of its random
/// coefficients.
///
/// `coef_covariance` is indexed row-major over (response component r,
/// regressor s) pairs with regressors ordered x* then z and intercepts
/// excluded: entry `(r * w + s, t * w + u)` is `Cov(Delta_rs, Delta_tu)`,
/// `w = p + q`. Rows of `Delta` below the first `p` are deterministic and
/// carry zero covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// Intercepts, one per error-prone covariate.
    pub delta0: Vec<f64>,
    /// p x p block: effect of each x* on each reference component (row =
    /// response, column = regressor).
    pub delta1: Vec<Vec<f64>>,
    /// p x q block: effect of each z.
    pub delta2: Vec<Vec<f64>>,
    /// p x p residual covariance of the calibration regression.
    pub residual_covariance: Vec<Vec<f64>>,
    /// (p*w) x (p*w) covariance of the non-intercept coefficients.
    pub coef_covariance: Vec<Vec<f64>>,
    pub n_c: usize,
    pub p: usize,
    pub q: usize,
}

impl CalibrationModel {
    pub fn w(&self) -> usize {
        self.p + self.q
    }

    pub fn coef_cov(&self) -> DMatrix<f64> {
        let d = self.p * self.w();
        DMatrix::from_fn(d, d, |r, c| self.coef_covariance[r][c])
    }

    /// An identity calibration with zero coefficient uncertainty.
    pub fn identity(p: usize, q: usize) -> Self {
        let w = p + q;
        Self {
            delta0: vec![0.0; p],
            delta1: (0..p)
                .map(|r| (0..p).map(|c| f64::from(u8::from(r == c))).collect())
                .collect(),
            delta2: vec![vec![0.0; q]; p],
            residual_covariance: vec![vec![0.0; p]; p],
            coef_covariance: vec![vec![0.0; p * w]; p * w],
            n_c: 0,
            p,
            q,
        }
    }
}

/// Ordinary least squares of each reference component on (1, x*, z) over the
/// calibration subset. Intercept rows/columns of the coefficient covariance
/// are dropped, matching the correction's needs.
pub fn fit_calibration(cohort: &Cohort) -> Result<CalibrationModel, CalibrationError> {
    let p = cohort.n_error_prone_covariates();
    let q = cohort.n_precise_covariates();
    let w = p + q;
    let k = 1 + w;
    let subset: Vec<_> = cohort
        .subjects()
        .iter()
        .filter(|s| s.in_calibration_subset && s.x_double_star.is_some())
        .collect();
    let n_c = subset.len();
    if n_c <= k {
        return Err(CalibrationError::SubsetTooSmall { n_c, k });
    }

    let mut design = DMatrix::zeros(n_c, k);
    let mut response = DMatrix::zeros(n_c, p);
    for (r, s) in subset.iter().enumerate() {
        design[(r, 0)] = 1.0;
        for (c, &v) in s.x_star.iter().enumerate() {
            design[(r, 1 + c)] = v;
        }
        for (c, &v) in s.z.iter().enumerate() {
            design[(r, 1 + p + c)] = v;
        }
        for (c, &v) in s.x_double_star.as_ref().unwrap().iter().enumerate() {
            response[(r, c)] = v;
        }
    }

    let xtx = design.transpose() * &design;
    let xtx_inv = xtx
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or(CalibrationError::RankDeficientDesign)?;
    let coefs = &xtx_inv * design.transpose() * &response; // k x p

    // Residual covariance with denominator n_c - k.
    let fitted = &design * &coefs;
    let resid = &response - fitted;
    let sigma_v = resid.transpose() * &resid / (n_c - k) as f64;

    let delta0: Vec<f64> = (0..p).map(|r| coefs[(0, r)]).collect();
    let delta1: Vec<Vec<f64>> = (0..p)
        .map(|r| (0..p).map(|c| coefs[(1 + c, r)]).collect())
        .collect();
    let delta2: Vec<Vec<f64>> = (0..p)
        .map(|r| (0..q).map(|c| coefs[(1 + p + c, r)]).collect())
        .collect();

    // Cov(vec(coef)) = Sigma_V (x) (X'X)^-1, restricted to non-intercept
    // regressors: Cov(Delta_rs, Delta_tu) = Sigma_V[r,t] * (X'X)^-1[1+s, 1+u].
    let d = p * w;
    let mut coef_cov = vec![vec![0.0; d]; d];
    for r in 0..p {
        for s in 0..w {
            for t in 0..p {
                for u in 0..w {
                    coef_cov[r * w + s][t * w + u] = sigma_v[(r, t)] * xtx_inv[(1 + s, 1 + u)];
                }
            }
        }
    }

    Ok(CalibrationModel {
        delta0,
        delta1,
        delta2,
        residual_covariance: (0..p)
            .map(|r| (0..p).map(|c| sigma_v[(r, c)]).collect())
            .collect(),
        coef_covariance: coef_cov,
        n_c,
        p,
        q,
    })
}

/// The block correction matrix and its inverse.
#[derive(Debug, Clone)]
pub struct CorrectionMatrix {
    pub delta: DMatrix<f64>,
    /// `A = Delta^-1`.
    pub a: DMatrix<f64>,
}

impl CorrectionMatrix {
    pub fn from_calibration(calib: &CalibrationModel) -> Result<Self, CalibrationError> {
        let (p, q, w) = (calib.p, calib.q, calib.w());
        let mut delta = DMatrix::zeros(w, w);
        for r in 0..p {
            for c in 0..p {
                delta[(r, c)] = calib.delta1[r][c];
            }
            for c in 0..q {
                delta[(r, p + c)] = calib.delta2[r][c];
            }
        }
        for r in 0..q {
            delta[(p + r, p + r)] = 1.0;
        }
        Self::from_delta(delta)
    }

    pub fn from_delta(delta: DMatrix<f64>) -> Result<Self, CalibrationError> {
        let a = delta
            .clone()
            .lu()
            .try_inverse()
            .filter(|a| a.iter().all(|v| v.is_finite()))
            .ok_or(CalibrationError::SingularDelta)?;
        Ok(Self { delta, a })
    }

    pub fn w(&self) -> usize {
        self.delta.nrows()
    }
}

/// Post-hoc coefficient correction `beta = beta* . Delta^-1` (row vector times
/// matrix).
pub fn correct_beta(
    beta_star: &CoefficientVector,
    corr: &CorrectionMatrix,
) -> Result<CoefficientVector, CalibrationError> {
    let w = corr.w();
    if beta_star.len() != w {
        return Err(CalibrationError::DimensionMismatch(format!(
            "beta* has {} entries, correction is {w} x {w}",
            beta_star.len()
        )));
    }
    let row = RowDVector::from_row_slice(&beta_star.packed());
    let corrected = row * &corr.a;
    Ok(CoefficientVector::from_slice(
        corrected.transpose().as_slice(),
        beta_star.beta_x.len(),
    ))
}

/// Delta-method covariance of the corrected coefficients:
/// `A' Sigma_beta* A` plus, entry by entry, `beta* Sigma_A(j1,j2) beta*'`
/// where `Sigma_A(j1,j2)[i1,i2]` is the quadruple sum over
/// `A[i1,r] A[s,j1] A[i2,t] A[u,j2] Cov(Delta_rs, Delta_tu)`; covariances
/// involving the deterministic rows of Delta are zero.
pub fn corrected_covariance(
    beta_star: &CoefficientVector,
    sigma_beta_star: &DMatrix<f64>,
    corr: &CorrectionMatrix,
    calib: &CalibrationModel,
) -> Result<DMatrix<f64>, CalibrationError> {
    let w = corr.w();
    let p = calib.p;
    if sigma_beta_star.nrows() != w || sigma_beta_star.ncols() != w {
        return Err(CalibrationError::DimensionMismatch(format!(
            "Sigma_beta* is {} x {}, expected {w} x {w}",
            sigma_beta_star.nrows(),
            sigma_beta_star.ncols()
        )));
    }
    if beta_star.len() != w || calib.w() != w {
        return Err(CalibrationError::DimensionMismatch(
            "beta*/calibration dimensions disagree with the correction matrix".into(),
        ));
    }
    let a = &corr.a;
    let first = a.transpose() * sigma_beta_star * a;

    let coef_cov = calib.coef_cov();
    let b = DVector::from_vec(beta_star.packed());
    let mut second = DMatrix::zeros(w, w);
    for j1 in 0..w {
        for j2 in 0..w {
            // Sigma_A for this (j1, j2) element.
            let mut sigma_a = DMatrix::zeros(w, w);
            for i1 in 0..w {
                for i2 in 0..w {
                    let mut acc = 0.0;
                    for r in 0..p {
                        for s in 0..w {
                            let cov_row = r * w + s;
                            let a_i1r_a_sj1 = a[(i1, r)] * a[(s, j1)];
                            if a_i1r_a_sj1 == 0.0 {
                                continue;
                            }
                            for t in 0..p {
                                for u in 0..w {
                                    acc += a_i1r_a_sj1
                                        * a[(i2, t)]
                                        * a[(u, j2)]
                                        * coef_cov[(cov_row, t * w + u)];
                                }
                            }
                        }
                    }
                    sigma_a[(i1, i2)] = acc;
                }
            }
            second[(j1, j2)] = (b.transpose() * &sigma_a * &b)[(0, 0)];
        }
    }
    let total = first + second;
    Ok((&total + total.transpose()) * 0.5)
}

/// Applies the fitted calibration to the whole cohort, replacing the x*
/// columns of the design with `delta0 + delta1 x* + delta2 z`. This backs the
/// refit-style sensitivity workflow; the main pipeline corrects coefficients
/// post hoc instead.
pub fn calibrated_design(cohort: &Cohort, calib: &CalibrationModel) -> DMatrix<f64> {
    let n = cohort.n_subjects();
    let (p, q) = (calib.p, calib.q);
    let mut x = DMatrix::zeros(n, p + q);
    for (i, s) in cohort.subjects().iter().enumerate() {
        for r in 0..p {
            let mut v = calib.delta0[r];
            for (c, &xs) in s.x_star.iter().enumerate() {
                v += calib.delta1[r][c] * xs;
            }
            for (c, &z) in s.z.iter().enumerate() {
                v += calib.delta2[r][c] * z;
            }
            x[(i, r)] = v;
        }
        for (c, &z) in s.z.iter().enumerate() {
            x[(i, p + c)] = z;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FollowUpMode, SubjectRecord, TimeGrid};
    use approx::assert_relative_eq;

    fn calib_cohort(make_ref: impl Fn(f64, &[f64]) -> f64) -> Cohort {
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let mut subjects = Vec::new();
        for i in 0..40 {
            let x = (i as f64) / 10.0 - 2.0;
            let z = vec![((i * 7) % 11) as f64 / 11.0, ((i * 3) % 5) as f64 / 5.0 - 0.4];
            let xref = make_ref(x, &z);
            subjects.push(SubjectRecord {
                id: format!("s{i}"),
                y: vec![0],
                t: vec![1.0],
                x_star: vec![x],
                z,
                stratum: "all".into(),
                in_calibration_subset: true,
                x_double_star: Some(vec![xref]),
            });
        }
        Cohort::from_parts(grid, subjects, FollowUpMode::StopAfterFirstPositive)
    }

    #[test]
    fn identity_calibration_recovered_exactly() {
        let cohort = calib_cohort(|x, _| x);
        let calib = fit_calibration(&cohort).unwrap();
        assert_relative_eq!(calib.delta1[0][0], 1.0, epsilon = 1e-10);
        assert!(calib.delta2[0].iter().all(|v| v.abs() < 1e-10));
        assert!(calib.delta0[0].abs() < 1e-10);
        let corr = CorrectionMatrix::from_calibration(&calib).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = f64::from(u8::from(r == c));
                assert_relative_eq!(corr.delta[(r, c)], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn exact_affine_relation_recovered() {
        let cohort = calib_cohort(|x, z| 0.3 + 0.6 * x + 0.25 * z[0] - 0.1 * z[1]);
        let calib = fit_calibration(&cohort).unwrap();
        assert_relative_eq!(calib.delta0[0], 0.3, epsilon = 1e-9);
        assert_relative_eq!(calib.delta1[0][0], 0.6, epsilon = 1e-9);
        assert_relative_eq!(calib.delta2[0][0], 0.25, epsilon = 1e-9);
        assert_relative_eq!(calib.delta2[0][1], -0.1, epsilon = 1e-9);
        // Exact fit leaves (numerically) zero residual variance.
        assert!(calib.residual_covariance[0][0] < 1e-16);
    }

    #[test]
    fn subset_too_small() {
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let subjects: Vec<SubjectRecord> = (0..4)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                y: vec![0],
                t: vec![1.0],
                x_star: vec![i as f64],
                z: vec![i as f64 * 0.5, -(i as f64)],
                stratum: "all".into(),
                in_calibration_subset: true,
                x_double_star: Some(vec![i as f64]),
            })
            .collect();
        let cohort = Cohort::from_parts(grid, subjects, FollowUpMode::StopAfterFirstPositive);
        assert!(matches!(
            fit_calibration(&cohort),
            Err(CalibrationError::SubsetTooSmall { .. })
        ));
    }

    #[test]
    fn univariate_correction_shortcut() {
        // p = 1, q = 0, beta* = -0.05, delta = 0.5 -> beta = -0.10
        let corr = CorrectionMatrix::from_delta(DMatrix::from_element(1, 1, 0.5)).unwrap();
        let beta = correct_beta(&CoefficientVector::new(vec![-0.05], vec![]), &corr).unwrap();
        assert_relative_eq!(beta.beta_x[0], -0.10, epsilon = 1e-14);
    }

    #[test]
    fn identity_correction_is_noop() {
        let corr = CorrectionMatrix::from_delta(DMatrix::identity(3, 3)).unwrap();
        let b = CoefficientVector::new(vec![0.4], vec![-0.3, 0.2]);
        let out = correct_beta(&b, &corr).unwrap();
        assert_eq!(out.packed(), b.packed());
    }

    #[test]
    fn block_formula_matches_full_inversion() {
        // p = 1, q = 2, delta1 = 0.8, delta2 = (0.3, 0.5).
        let mut delta = DMatrix::identity(3, 3);
        delta[(0, 0)] = 0.8;
        delta[(0, 1)] = 0.3;
        delta[(0, 2)] = 0.5;
        let corr = CorrectionMatrix::from_delta(delta).unwrap();
        let beta_star = CoefficientVector::new(vec![0.25], vec![-0.4, 0.1]);
        let by_matrix = correct_beta(&beta_star, &corr).unwrap().packed();
        // Block-inverse route: A = [[1/d1, -d2/d1], [0, I]].
        let bx = beta_star.beta_x[0] / 0.8;
        let expected = [
            bx,
            -0.4 + -(0.3 / 0.8) * 0.25,
            0.1 + -(0.5 / 0.8) * 0.25,
        ];
        for (a, e) in by_matrix.iter().zip(expected) {
            assert_relative_eq!(*a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_delta_detected() {
        let delta = DMatrix::zeros(2, 2);
        assert!(matches!(
            CorrectionMatrix::from_delta(delta),
            Err(CalibrationError::SingularDelta)
        ));
    }

    #[test]
    fn univariate_delta_method_closed_form() {
        // p = 1, q = 0: var(beta) = var(beta*)/delta^2 + beta*^2 var(delta)/delta^4.
        let delta_hat = 0.62;
        let var_delta = 0.0031;
        let beta_star = -0.47;
        let var_beta_star = 0.012;
        let calib = CalibrationModel {
            delta0: vec![0.1],
            delta1: vec![vec![delta_hat]],
            delta2: vec![vec![]],
            residual_covariance: vec![vec![0.05]],
            coef_covariance: vec![vec![var_delta]],
            n_c: 100,
            p: 1,
            q: 0,
        };
        let corr = CorrectionMatrix::from_calibration(&calib).unwrap();
        let cov = corrected_covariance(
            &CoefficientVector::new(vec![beta_star], vec![]),
            &DMatrix::from_element(1, 1, var_beta_star),
            &corr,
            &calib,
        )
        .unwrap();
        let expected = var_beta_star / delta_hat.powi(2)
            + beta_star.powi(2) * var_delta / delta_hat.powi(4);
        assert_relative_eq!(cov[(0, 0)], expected, max_relative = 1e-12);
    }

    #[test]
    fn known_calibration_drops_second_term() {
        let mut calib = CalibrationModel::identity(1, 2);
        calib.delta1[0][0] = 0.7;
        calib.delta2[0] = vec![0.2, -0.3];
        let corr = CorrectionMatrix::from_calibration(&calib).unwrap();
        let sigma = DMatrix::from_row_slice(
            3,
            3,
            &[0.04, 0.01, 0.0, 0.01, 0.05, 0.005, 0.0, 0.005, 0.03],
        );
        let beta_star = CoefficientVector::new(vec![0.3], vec![-0.2, 0.15]);
        let cov = corrected_covariance(&beta_star, &sigma, &corr, &calib).unwrap();
        let expected = corr.a.transpose() * &sigma * &corr.a;
        for r in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(cov[(r, c)], expected[(r, c)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn corrected_covariance_symmetric_nonnegative_diagonal() {
        let cohort = calib_cohort(|x, z| 0.2 + 0.55 * x + 0.2 * z[0] + 0.1 * z[1] + 0.01 * (x * x));
        let calib = fit_calibration(&cohort).unwrap();
        let corr = CorrectionMatrix::from_calibration(&calib).unwrap();
        let sigma = DMatrix::from_row_slice(
            3,
            3,
            &[0.02, 0.002, -0.001, 0.002, 0.03, 0.0, -0.001, 0.0, 0.025],
        );
        let beta_star = CoefficientVector::new(vec![0.5], vec![-0.1, 0.2]);
        let cov = corrected_covariance(&beta_star, &sigma, &corr, &calib).unwrap();
        for r in 0..3 {
            assert!(cov[(r, r)] >= 0.0);
            for c in 0..3 {
                assert_relative_eq!(cov[(r, c)], cov[(c, r)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn calibrated_design_affine_evaluation() {
        let cohort = calib_cohort(|x, _| x);
        let mut calib = CalibrationModel::identity(1, 2);
        calib.delta0 = vec![1.0];
        calib.delta1 = vec![vec![0.5]];
        let design = calibrated_design(&cohort, &calib);
        for (i, s) in cohort.subjects().iter().enumerate() {
            assert_relative_eq!(design[(i, 0)], 1.0 + 0.5 * s.x_star[0], epsilon = 1e-14);
            assert_relative_eq!(design[(i, 1)], s.z[0], epsilon = 1e-14);
        }
        // Identity calibration leaves the design unchanged.
        let ident = CalibrationModel::identity(1, 2);
        let d2 = calibrated_design(&cohort, &ident);
        for (i, s) in cohort.subjects().iter().enumerate() {
            assert_relative_eq!(d2[(i, 0)], s.x_star[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn diagonal_delta1_zero_delta2_leaves_beta_z_unchanged() {
        let mut calib = CalibrationModel::identity(2, 2);
        calib.delta1 = vec![vec![0.5, 0.0], vec![0.0, 0.8]];
        let corr = CorrectionMatrix::from_calibration(&calib).unwrap();
        let b = CoefficientVector::new(vec![0.1, -0.2], vec![0.3, 0.4]);
        let out = correct_beta(&b, &corr).unwrap();
        assert_relative_eq!(out.beta_x[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(out.beta_x[1], -0.25, epsilon = 1e-12);
        assert_relative_eq!(out.beta_z[0], 0.3, epsilon = 1e-14);
        assert_relative_eq!(out.beta_z[1], 0.4, epsilon = 1e-14);
    }
}
