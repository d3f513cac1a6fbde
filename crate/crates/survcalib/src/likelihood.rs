//! Misclassification-aware likelihood for discrete-time proportional hazards.
//!
//! For subject `i` and candidate event interval `j`, `C_ij` is the probability
//! of the observed outcome vector given the event fell in interval `j`:
//! a visit at grid point `tau_m` is post-event when `m >= j` (contributing
//! `Se^y (1-Se)^(1-y)`) and pre-event when `m <= j-1` (contributing
//! `Sp^(1-y) (1-Sp)^y`), with products taken over observed visits only so the
//! same rule covers missed visits and arbitrary schedules.
//!
//! With `theta = M S` and `D = C M`, the log-likelihood is
//! `sum_i log(sum_j D_ij S_j^exp(x_i' beta))`; stratified and baseline-NPV
//! variants reuse the same `D` with per-stratum curves and an `eta` weight on
//! the `j > 1` terms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Cohort, CoefficientVector, OutcomeErrorModel, SurvivalCurve};
use crate::param::{self, ParamLayout};

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("subject {id}: visit time {t} is not on the grid")]
    GridMismatch { id: String, t: f64 },
    #[error("likelihood term for subject index {subject} is non-positive; parameter point is invalid")]
    NonPositiveLikelihoodTerm { subject: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Param(#[from] param::ParamError),
}

/// `theta = M S` transformation: upper bidiagonal with unit diagonal and -1
/// superdiagonal, so `theta_j = S_j - S_{j+1}` and `theta_{J+1} = S_{J+1}`.
pub fn build_m_matrix(j_plus_1: usize) -> DMatrix<f64> {
    assert!(j_plus_1 >= 2, "need at least two intervals");
    let mut m = DMatrix::zeros(j_plus_1, j_plus_1);
    for j in 0..j_plus_1 {
        m[(j, j)] = 1.0;
        if j + 1 < j_plus_1 {
            m[(j, j + 1)] = -1.0;
        }
    }
    m
}

/// Probability of each subject's observed outcome vector conditional on the
/// true event interval. Products are accumulated in the log domain.
pub fn compute_c_matrix(
    cohort: &Cohort,
    err: &OutcomeErrorModel,
) -> Result<DMatrix<f64>, LikelihoodError> {
    let n = cohort.n_subjects();
    let n_int = cohort.grid().n_intervals();
    let mut c = DMatrix::zeros(n, n_int);
    for (i, subj) in cohort.subjects().iter().enumerate() {
        let (se, sp) = err.rates_for(&subj.stratum);
        let idx = cohort.visit_indices(i);
        let n_i = idx.len();
        // Per-visit log contributions under the two regimes.
        let mut log_post = Vec::with_capacity(n_i);
        let mut log_pre = Vec::with_capacity(n_i);
        for (&m, (&y, &t)) in idx.iter().zip(subj.y.iter().zip(&subj.t)) {
            if m == usize::MAX {
                return Err(LikelihoodError::GridMismatch {
                    id: subj.id.clone(),
                    t,
                });
            }
            if y == 1 {
                log_post.push(se.ln());
                log_pre.push((1.0 - sp).ln());
            } else {
                log_post.push((1.0 - se).ln());
                log_pre.push(sp.ln());
            }
        }
        // Prefix sums: pre-event visits come first in grid order.
        let mut pre_prefix = vec![0.0; n_i + 1];
        let mut post_suffix = vec![0.0; n_i + 1];
        for l in 0..n_i {
            pre_prefix[l + 1] = pre_prefix[l] + log_pre[l];
        }
        for l in (0..n_i).rev() {
            post_suffix[l] = post_suffix[l + 1] + log_post[l];
        }
        // Interval j (1-based): visits with grid index m >= j are post-event,
        // i.e. 0-based visit grid index m0 satisfying m0 + 1 >= j.
        for j in 1..=n_int {
            let split = idx.partition_point(|&m0| m0 + 1 < j);
            c[(i, j - 1)] = (pre_prefix[split] + post_suffix[split]).exp();
        }
    }
    Ok(c)
}

/// Likelihood variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodMode {
    Standard,
    Stratified,
    NpvAdjusted,
    StratifiedNpv,
}

impl LikelihoodMode {
    pub fn stratified(self) -> bool {
        matches!(self, LikelihoodMode::Stratified | LikelihoodMode::StratifiedNpv)
    }

    pub fn npv_adjusted(self) -> bool {
        matches!(self, LikelihoodMode::NpvAdjusted | LikelihoodMode::StratifiedNpv)
    }
}

/// The misclassification matrices shared by all likelihood variants.
#[derive(Debug, Clone)]
pub struct LikelihoodMatrices {
    pub c: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LikelihoodMatrices {
    pub fn from_c(c: DMatrix<f64>) -> Self {
        let m = build_m_matrix(c.ncols());
        let d = &c * &m;
        Self { c, m, d }
    }
}

/// Assembled objective: matrices, design, strata and error model.
#[derive(Debug, Clone)]
pub struct LikelihoodSpec {
    pub matrices: LikelihoodMatrices,
    /// N x (p + q) covariate matrix, columns x* (or calibrated values) then z.
    pub design: DMatrix<f64>,
    /// Per-subject stratum index in `0..n_strata`; all zero unless stratified.
    pub strata: Vec<usize>,
    pub n_strata: usize,
    pub error_model: OutcomeErrorModel,
    pub mode: LikelihoodMode,
    p: usize,
    q: usize,
}

impl LikelihoodSpec {
    pub fn from_cohort(
        cohort: &Cohort,
        err: &OutcomeErrorModel,
        mode: LikelihoodMode,
    ) -> Result<Self, LikelihoodError> {
        let design = design_matrix(cohort);
        Self::with_design(cohort, err, mode, design)
    }

    /// Builds the spec with an explicit design matrix (e.g. calibrated values
    /// in place of the error-prone columns).
    pub fn with_design(
        cohort: &Cohort,
        err: &OutcomeErrorModel,
        mode: LikelihoodMode,
        design: DMatrix<f64>,
    ) -> Result<Self, LikelihoodError> {
        let c = compute_c_matrix(cohort, err)?;
        if design.nrows() != c.nrows() {
            return Err(LikelihoodError::DimensionMismatch(format!(
                "design has {} rows, cohort has {} subjects",
                design.nrows(),
                c.nrows()
            )));
        }
        let (strata, n_strata) = if mode.stratified() {
            (
                (0..cohort.n_subjects()).map(|i| cohort.stratum_index(i)).collect(),
                cohort.n_strata(),
            )
        } else {
            (vec![0; cohort.n_subjects()], 1)
        };
        Ok(Self {
            matrices: LikelihoodMatrices::from_c(c),
            design,
            strata,
            n_strata,
            error_model: err.clone(),
            mode,
            p: cohort.n_error_prone_covariates(),
            q: cohort.n_precise_covariates(),
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.matrices.c.nrows()
    }

    pub fn n_intervals(&self) -> usize {
        self.matrices.c.ncols()
    }

    pub fn n_error_prone(&self) -> usize {
        self.p
    }

    pub fn n_precise(&self) -> usize {
        self.q
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_strata: self.n_strata,
            n_intervals: self.n_intervals(),
            s1_free: self.mode.npv_adjusted(),
            n_coefficients: self.design.ncols(),
        }
    }

    fn eta_weight(&self) -> f64 {
        if self.mode.npv_adjusted() {
            self.error_model.eta
        } else {
            1.0
        }
    }
}

/// Stacks x* and z columns into the N x (p + q) design matrix.
pub fn design_matrix(cohort: &Cohort) -> DMatrix<f64> {
    let n = cohort.n_subjects();
    let p = cohort.n_error_prone_covariates();
    let q = cohort.n_precise_covariates();
    let mut x = DMatrix::zeros(n, p + q);
    for (i, s) in cohort.subjects().iter().enumerate() {
        for (r, &v) in s.x_star.iter().enumerate() {
            x[(i, r)] = v;
        }
        for (r, &v) in s.z.iter().enumerate() {
            x[(i, p + r)] = v;
        }
    }
    x
}

/// Log-likelihood at explicit survival curves (one per stratum) and
/// coefficients. Returns an error naming the first subject whose inner sum is
/// non-positive, signalling an invalid parameter point.
pub fn log_likelihood(
    spec: &LikelihoodSpec,
    curves: &[SurvivalCurve],
    beta: &CoefficientVector,
) -> Result<f64, LikelihoodError> {
    let log_s = curves_log_survival(spec, curves)?;
    let eval = eval_terms(spec, &log_s, &beta.packed(), false)?;
    Ok(eval.loglik)
}

/// Analytic gradient with respect to transformed survival parameters (see the
/// parameter chain in [`crate::param`]) and `beta`, in packed layout order.
pub fn log_likelihood_gradient(
    spec: &LikelihoodSpec,
    curves: &[SurvivalCurve],
    beta: &CoefficientVector,
) -> Result<DVector<f64>, LikelihoodError> {
    let layout = spec.layout();
    let x = layout.pack(curves, &beta.packed())?;
    let (_, grad) = eval_packed(spec, &layout, &x, true)?;
    Ok(DVector::from_vec(grad.unwrap()))
}

fn curves_log_survival(
    spec: &LikelihoodSpec,
    curves: &[SurvivalCurve],
) -> Result<Vec<Vec<f64>>, LikelihoodError> {
    if curves.len() != spec.n_strata {
        return Err(LikelihoodError::DimensionMismatch(format!(
            "expected {} survival curves, got {}",
            spec.n_strata,
            curves.len()
        )));
    }
    let n_int = spec.n_intervals();
    curves
        .iter()
        .map(|c| {
            if c.n_intervals() != n_int {
                return Err(LikelihoodError::DimensionMismatch(format!(
                    "curve has {} intervals, expected {n_int}",
                    c.n_intervals()
                )));
            }
            Ok(c.values().iter().map(|&s| s.ln()).collect())
        })
        .collect()
}

/// Packed-coordinate evaluation used by the optimizer: value and (optionally)
/// the analytic gradient at `x = [phi per stratum..., beta]`.
pub fn eval_packed(
    spec: &LikelihoodSpec,
    layout: &ParamLayout,
    x: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), LikelihoodError> {
    if x.len() != layout.n_params() {
        return Err(LikelihoodError::DimensionMismatch(format!(
            "expected {} parameters, got {}",
            layout.n_params(),
            x.len()
        )));
    }
    let log_s: Vec<Vec<f64>> = (0..layout.n_strata)
        .map(|k| layout.log_survival(&x[layout.phi_range(k)]))
        .collect();
    let beta = &x[layout.beta_range()];
    let eval = eval_terms(spec, &log_s, beta, want_grad)?;
    if !want_grad {
        return Ok((eval.loglik, None));
    }

    // Chain dl/d(ln S) back to the phi coordinates: d(ln S_j)/d(psi_c) = ln S_j
    // at the chain position of j, and phi_m feeds every psi_c with c >= m.
    let mut grad = vec![0.0; layout.n_params()];
    let skip = usize::from(!layout.s1_free);
    for k in 0..layout.n_strata {
        let r = layout.phi_range(k);
        let d_log_s = &eval.d_log_s[k];
        let n_phi = layout.phi_per_stratum();
        let mut suffix = 0.0;
        for c in (0..n_phi).rev() {
            let j = c + skip;
            suffix += d_log_s[j] * log_s[k][j];
            grad[r.start + c] = suffix;
        }
    }
    grad[layout.beta_range()].copy_from_slice(&eval.d_beta);
    Ok((eval.loglik, Some(grad)))
}

struct EvalResult {
    loglik: f64,
    /// dl/d(ln S_{k,j}) per stratum.
    d_log_s: Vec<Vec<f64>>,
    d_beta: Vec<f64>,
}

/// Per-subject accumulation. Subjects are processed in fixed-size blocks that
/// are reduced in index order, so results are bit-identical regardless of the
/// number of worker threads.
fn eval_terms(
    spec: &LikelihoodSpec,
    log_s: &[Vec<f64>],
    beta: &[f64],
    want_grad: bool,
) -> Result<EvalResult, LikelihoodError> {
    if beta.len() != spec.design.ncols() {
        return Err(LikelihoodError::DimensionMismatch(format!(
            "expected {} coefficients, got {}",
            spec.design.ncols(),
            beta.len()
        )));
    }
    let n = spec.n_subjects();
    let n_int = spec.n_intervals();
    let n_beta = beta.len();
    let eta = spec.eta_weight();

    const BLOCK: usize = 1024;
    let n_blocks = n.div_ceil(BLOCK);

    let run_block = |b: usize| -> BlockAcc {
        let lo = b * BLOCK;
        let hi = ((b + 1) * BLOCK).min(n);
        let mut acc = BlockAcc::new(spec.n_strata, n_int, n_beta, want_grad);
        let mut terms = vec![0.0; n_int];
        for i in lo..hi {
            let k = spec.strata[i];
            let ls = &log_s[k];
            let mut u = 0.0;
            for r in 0..n_beta {
                u += spec.design[(i, r)] * beta[r];
            }
            let e = u.min(700.0).exp();
            let mut inner = 0.0;
            for j in 0..n_int {
                let w = if j == 0 { 1.0 } else { eta };
                let pow = if ls[j] == 0.0 { 1.0 } else { (e * ls[j]).exp() };
                let t = w * spec.matrices.d[(i, j)] * pow;
                terms[j] = t;
                inner += t;
            }
            if !(inner > 0.0) || !inner.is_finite() {
                acc.bad = Some(i);
                return acc;
            }
            acc.loglik += inner.ln();
            if want_grad {
                let inv = 1.0 / inner;
                let mut dot_l = 0.0;
                for j in 0..n_int {
                    let a = terms[j] * e * inv;
                    acc.d_log_s[k][j] += a;
                    dot_l += a * ls[j];
                }
                for r in 0..n_beta {
                    acc.d_beta[r] += dot_l * spec.design[(i, r)];
                }
            }
        }
        acc
    };

    let blocks: Vec<BlockAcc> = if n >= 4 * BLOCK {
        (0..n_blocks).into_par_iter().map(run_block).collect()
    } else {
        (0..n_blocks).map(run_block).collect()
    };

    let mut total = EvalResult {
        loglik: 0.0,
        d_log_s: vec![vec![0.0; n_int]; spec.n_strata],
        d_beta: vec![0.0; n_beta],
    };
    for acc in blocks {
        if let Some(i) = acc.bad {
            return Err(LikelihoodError::NonPositiveLikelihoodTerm { subject: i });
        }
        total.loglik += acc.loglik;
        for (k, row) in acc.d_log_s.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                total.d_log_s[k][j] += v;
            }
        }
        for (r, v) in acc.d_beta.into_iter().enumerate() {
            total.d_beta[r] += v;
        }
    }
    Ok(total)
}

struct BlockAcc {
    loglik: f64,
    d_log_s: Vec<Vec<f64>>,
    d_beta: Vec<f64>,
    bad: Option<usize>,
}

impl BlockAcc {
    fn new(n_strata: usize, n_int: usize, n_beta: usize, want_grad: bool) -> Self {
        let (ds, db) = if want_grad {
            (vec![vec![0.0; n_int]; n_strata], vec![0.0; n_beta])
        } else {
            (vec![], vec![])
        };
        Self {
            loglik: 0.0,
            d_log_s: ds,
            d_beta: db,
            bad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FollowUpMode, SubjectRecord, TimeGrid};
    use approx::assert_relative_eq;

    fn subject(id: &str, y: Vec<u8>, t: Vec<f64>, x: f64, z: Vec<f64>) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            y,
            t,
            x_star: vec![x],
            z,
            stratum: "all".into(),
            in_calibration_subset: false,
            x_double_star: None,
        }
    }

    fn two_visit_cohort(y: Vec<u8>) -> Cohort {
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let s = subject("a", y, vec![1.0, 2.0], 0.0, vec![]);
        Cohort::from_parts(grid, vec![s], FollowUpMode::FullSchedule)
    }

    #[test]
    fn c_matrix_full_schedule_hand_values() {
        // Se = 0.8, Sp = 0.9, J = 2, y = (0, 1)
        let cohort = two_visit_cohort(vec![0, 1]);
        let err = OutcomeErrorModel::new(0.8, 0.9, 1.0).unwrap();
        let c = compute_c_matrix(&cohort, &err).unwrap();
        assert_relative_eq!(c[(0, 0)], 0.16, max_relative = 1e-12);
        assert_relative_eq!(c[(0, 1)], 0.72, max_relative = 1e-12);
        assert_relative_eq!(c[(0, 2)], 0.09, max_relative = 1e-12);
    }

    #[test]
    fn c_matrix_perfect_test_identifies_interval() {
        let cohort = two_visit_cohort(vec![0, 1]);
        let err = OutcomeErrorModel::perfect();
        let c = compute_c_matrix(&cohort, &err).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert_eq!(c[(0, 1)], 1.0);
        assert_eq!(c[(0, 2)], 0.0);
    }

    #[test]
    fn c_matrix_missed_visits() {
        // Grid (t1, t2, t3); subject observes only t2 with y = 1.
        let grid = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let s = subject("a", vec![1], vec![2.0], 0.0, vec![]);
        let cohort = Cohort::from_parts(grid, vec![s], FollowUpMode::FullSchedule);
        let err = OutcomeErrorModel::new(0.8, 0.9, 1.0).unwrap();
        let c = compute_c_matrix(&cohort, &err).unwrap();
        let expected = [0.8, 0.8, 0.1, 0.1];
        for (j, e) in expected.iter().enumerate() {
            assert_relative_eq!(c[(0, j)], *e, max_relative = 1e-12);
        }
    }

    #[test]
    fn c_matrix_per_stratum_override() {
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let mut s1 = subject("a", vec![1], vec![1.0], 0.0, vec![]);
        s1.stratum = "one".into();
        let mut s2 = subject("b", vec![1], vec![1.0], 0.0, vec![]);
        s2.stratum = "two".into();
        let cohort = Cohort::from_parts(grid, vec![s1, s2], FollowUpMode::FullSchedule);
        let err = OutcomeErrorModel::new(0.8, 0.9, 1.0)
            .unwrap()
            .with_stratum_override("two", 0.7, 0.95)
            .unwrap();
        let c = compute_c_matrix(&cohort, &err).unwrap();
        assert_relative_eq!(c[(0, 0)], 0.8, max_relative = 1e-12);
        assert_relative_eq!(c[(1, 0)], 0.7, max_relative = 1e-12);
        assert_relative_eq!(c[(0, 1)], 0.1, max_relative = 1e-12);
        assert_relative_eq!(c[(1, 1)], 0.05, max_relative = 1e-12);
    }

    #[test]
    fn m_matrix_differences() {
        let m = build_m_matrix(3);
        let s = DVector::from_vec(vec![1.0, 0.6, 0.3]);
        let theta = &m * &s;
        assert_relative_eq!(theta[0], 0.4, max_relative = 1e-12);
        assert_relative_eq!(theta[1], 0.3, max_relative = 1e-12);
        assert_relative_eq!(theta[2], 0.3, max_relative = 1e-12);
    }

    #[test]
    fn m_matrix_two_intervals_and_telescoping() {
        let m = build_m_matrix(2);
        for s2 in [0.1, 0.5, 0.9] {
            let s = DVector::from_vec(vec![1.0, s2]);
            let theta = &m * &s;
            assert_relative_eq!(theta[0], 1.0 - s2, max_relative = 1e-12);
            assert_relative_eq!(theta[1], s2, max_relative = 1e-12);
            assert_relative_eq!(theta.sum(), 1.0, max_relative = 1e-12);
        }
    }

    fn small_spec(mode: LikelihoodMode, eta: f64) -> (LikelihoodSpec, Cohort) {
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let mut subjects = vec![
            subject("a", vec![0, 1], vec![1.0, 2.0], 0.3, vec![-0.2]),
            subject("b", vec![0, 0], vec![1.0, 2.0], -0.5, vec![0.8]),
            subject("c", vec![1, 1], vec![1.0, 2.0], 1.1, vec![0.1]),
        ];
        if mode.stratified() {
            subjects[1].stratum = "s2".into();
        }
        let cohort = Cohort::from_parts(grid, subjects, FollowUpMode::FullSchedule);
        let mut err = OutcomeErrorModel::new(0.8, 0.9, eta).unwrap();
        err.eta = eta;
        let spec = LikelihoodSpec::from_cohort(&cohort, &err, mode).unwrap();
        (spec, cohort)
    }

    /// Brute-force value over the theta-form of the joint probability,
    /// independent of the D-matrix identity.
    fn brute_force(
        spec: &LikelihoodSpec,
        curves: &[SurvivalCurve],
        beta: &[f64],
        eta: f64,
        npv: bool,
    ) -> f64 {
        let n_int = spec.n_intervals();
        let mut total = 0.0;
        for i in 0..spec.n_subjects() {
            let k = spec.strata[i];
            let s = curves[k].values();
            let mut u = 0.0;
            for r in 0..beta.len() {
                u += spec.design[(i, r)] * beta[r];
            }
            let e = u.exp();
            let mut inner = 0.0;
            for j in 0..n_int {
                let s_hi = s[j].powf(e);
                let s_lo = if j + 1 < n_int { s[j + 1].powf(e) } else { 0.0 };
                inner += spec.matrices.c[(i, j)] * (s_hi - s_lo);
            }
            if npv {
                inner = eta * inner + (1.0 - eta) * spec.matrices.c[(i, 0)] * s[0].powf(e);
            }
            total += inner.ln();
        }
        total
    }

    #[test]
    fn value_matches_brute_force_theta_form() {
        let (spec, _) = small_spec(LikelihoodMode::Standard, 1.0);
        let curve = SurvivalCurve::new(vec![1.0, 0.7, 0.4], false).unwrap();
        let beta = CoefficientVector::new(vec![0.4], vec![-0.3]);
        let v = log_likelihood(&spec, &[curve.clone()], &beta).unwrap();
        let bf = brute_force(&spec, &[curve], &beta.packed(), 1.0, false);
        assert_relative_eq!(v, bf, max_relative = 1e-13);
    }

    #[test]
    fn npv_with_eta_one_reduces_to_standard() {
        let (spec_std, cohort) = small_spec(LikelihoodMode::Standard, 1.0);
        let err = OutcomeErrorModel::new(0.8, 0.9, 1.0).unwrap();
        let spec_npv =
            LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::NpvAdjusted).unwrap();
        let beta = CoefficientVector::new(vec![0.2], vec![0.1]);
        let s_std = SurvivalCurve::new(vec![1.0, 0.7, 0.4], false).unwrap();
        let s_npv = SurvivalCurve::new_unchecked(vec![1.0, 0.7, 0.4], true);
        let v1 = log_likelihood(&spec_std, &[s_std], &beta).unwrap();
        let v2 = log_likelihood(&spec_npv, &[s_npv], &beta).unwrap();
        assert_relative_eq!(v1, v2, max_relative = 1e-14);
    }

    #[test]
    fn single_stratum_stratified_reduces_to_standard() {
        let (spec_std, cohort) = small_spec(LikelihoodMode::Standard, 1.0);
        let err = OutcomeErrorModel::new(0.8, 0.9, 1.0).unwrap();
        let spec_str =
            LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::Stratified).unwrap();
        assert_eq!(spec_str.n_strata, 1);
        let beta = CoefficientVector::new(vec![0.2], vec![0.1]);
        let s = SurvivalCurve::new(vec![1.0, 0.7, 0.4], false).unwrap();
        let v1 = log_likelihood(&spec_std, &[s.clone()], &beta).unwrap();
        let v2 = log_likelihood(&spec_str, &[s], &beta).unwrap();
        assert_relative_eq!(v1, v2, max_relative = 1e-14);
    }

    #[test]
    fn npv_value_matches_brute_force() {
        let (spec, _) = small_spec(LikelihoodMode::NpvAdjusted, 0.9);
        let curve = SurvivalCurve::new(vec![0.95, 0.7, 0.4], true).unwrap();
        let beta = CoefficientVector::new(vec![0.4], vec![-0.3]);
        let v = log_likelihood(&spec, &[curve.clone()], &beta).unwrap();
        let bf = brute_force(&spec, &[curve], &beta.packed(), 0.9, true);
        assert_relative_eq!(v, bf, max_relative = 1e-13);
    }

    #[test]
    fn stratified_value_matches_brute_force() {
        let (spec, _) = small_spec(LikelihoodMode::Stratified, 1.0);
        assert_eq!(spec.n_strata, 2);
        let c1 = SurvivalCurve::new(vec![1.0, 0.7, 0.4], false).unwrap();
        let c2 = SurvivalCurve::new(vec![1.0, 0.8, 0.6], false).unwrap();
        let beta = CoefficientVector::new(vec![0.4], vec![-0.3]);
        let v = log_likelihood(&spec, &[c1.clone(), c2.clone()], &beta).unwrap();
        let bf = brute_force(&spec, &[c1, c2], &beta.packed(), 1.0, false);
        assert_relative_eq!(v, bf, max_relative = 1e-13);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (mode, eta) in [
            (LikelihoodMode::Standard, 1.0),
            (LikelihoodMode::Stratified, 1.0),
            (LikelihoodMode::NpvAdjusted, 0.92),
            (LikelihoodMode::StratifiedNpv, 0.92),
        ] {
            let (spec, _) = small_spec(mode, eta);
            let layout = spec.layout();
            let x: Vec<f64> = (0..layout.n_params())
                .map(|i| 0.15 + 0.1 * (i as f64) * if i % 2 == 0 { 1.0 } else { -0.5 })
                .collect();
            let (_, grad) = eval_packed(&spec, &layout, &x, true).unwrap();
            let grad = grad.unwrap();
            let h = 1e-6;
            for a in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += h;
                xm[a] -= h;
                let (fp, _) = eval_packed(&spec, &layout, &xp, false).unwrap();
                let (fm, _) = eval_packed(&spec, &layout, &xm, false).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let denom = grad[a].abs().max(1.0);
                assert!(
                    ((grad[a] - fd) / denom).abs() < 1e-7,
                    "mode {mode:?} coord {a}: analytic {} vs fd {fd}",
                    grad[a]
                );
            }
        }
    }

    #[test]
    fn nonpositive_term_reports_subject() {
        let (spec, _) = small_spec(LikelihoodMode::Standard, 1.0);
        // A wildly non-monotone curve makes some D-weighted sums negative.
        let bad = SurvivalCurve::new_unchecked(vec![1.0, 0.05, 0.9], false);
        let beta = CoefficientVector::new(vec![0.0], vec![0.0]);
        let err = log_likelihood(&spec, &[bad], &beta).unwrap_err();
        assert!(matches!(
            err,
            LikelihoodError::NonPositiveLikelihoodTerm { .. }
        ));
    }

    #[test]
    fn c_rows_are_conditional_pmfs() {
        // Full schedule, all visits observed: summing C_ij over all 2^n
        // outcome vectors gives 1 for each interval j.
        let grid = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let err = OutcomeErrorModel::new(0.77, 0.88, 1.0).unwrap();
        let n_int = grid.n_intervals();
        let mut sums = vec![0.0; n_int];
        for bits in 0..8u8 {
            let y: Vec<u8> = (0..3).map(|b| (bits >> b) & 1).collect();
            let s = subject("a", y, vec![1.0, 2.0, 3.0], 0.0, vec![]);
            let cohort = Cohort::from_parts(grid.clone(), vec![s], FollowUpMode::FullSchedule);
            let c = compute_c_matrix(&cohort, &err).unwrap();
            for j in 0..n_int {
                sums[j] += c[(0, j)];
            }
        }
        for s in sums {
            assert_relative_eq!(s, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn d_times_s_equals_c_times_theta() {
        let (spec, _) = small_spec(LikelihoodMode::Standard, 1.0);
        let curve = SurvivalCurve::new(vec![1.0, 0.63, 0.17], false).unwrap();
        let s = curve.values();
        let theta = curve.interval_masses();
        for i in 0..spec.n_subjects() {
            let lhs: f64 = (0..3).map(|j| spec.matrices.d[(i, j)] * s[j]).sum();
            let rhs: f64 = (0..3).map(|j| spec.matrices.c[(i, j)] * theta[j]).sum();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    #[test]
    fn finite_for_valid_curves() {
        let (spec, _) = small_spec(LikelihoodMode::Standard, 1.0);
        for s2 in [0.9999, 0.5, 0.01] {
            let curve = SurvivalCurve::new(vec![1.0, s2, s2 * 0.5], false).unwrap();
            let beta = CoefficientVector::new(vec![2.0], vec![-2.0]);
            let v = log_likelihood(&spec, &[curve], &beta).unwrap();
            assert!(v.is_finite());
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn d_s_identity_under_random_curves(
            ratios in proptest::collection::vec(0.05f64..0.95, 2usize..=2),
            exponent in 0.2f64..3.0,
        ) {
            let (spec, _) = small_spec(LikelihoodMode::Standard, 1.0);
            let s2 = ratios[0];
            let s3 = s2 * ratios[1];
            let curve = SurvivalCurve::new(vec![1.0, s2, s3], false).unwrap();
            let s = curve.values();
            for i in 0..spec.n_subjects() {
                let lhs: f64 = (0..3).map(|j| spec.matrices.d[(i, j)] * s[j].powf(exponent)).sum();
                let rhs: f64 = (0..3)
                    .map(|j| {
                        let hi = s[j].powf(exponent);
                        let lo = if j + 1 < 3 { s[j + 1].powf(exponent) } else { 0.0 };
                        spec.matrices.c[(i, j)] * (hi - lo)
                    })
                    .sum();
                proptest::prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            }
        }
    }
}
