//! Domain types for discrete-time survival data with error-prone outcomes,
//! plus ingestion of long-format records into analysis-ready cohorts.
//!
//! The time axis is a shared grid of distinct visit times `tau_1 < ... < tau_J`
//! partitioning follow-up into `J + 1` intervals `(tau_{j-1}, tau_j]`, with
//! `tau_0 = 0` and `tau_{J+1} = infinity` implicit.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("time grid must contain at least one visit time")]
    EmptyGrid,
    #[error("time grid entries must be strictly increasing and positive (offending index {0})")]
    NonIncreasingGrid(usize),
    #[error("subject {id}: visit times not strictly increasing")]
    NonmonotoneVisits { id: String },
    #[error("subject {id}: baseline covariate `{column}` varies across rows")]
    CovariateDriftWithinSubject { id: String, column: String },
    #[error("subject {id}: in calibration subset but `{column}` is missing")]
    MissingCalibrationMeasure { id: String, column: String },
    #[error("no rows to ingest")]
    EmptyCohort,
    #[error("subject {id}: outcome must be 0 or 1, got {value}")]
    InvalidOutcome { id: String, value: f64 },
    #[error("cohort failed validation:\n{0}")]
    InvalidCohort(DiagnosticList),
    #[error("sensitivity/specificity/NPV must lie in (0, 1]: {0}")]
    InvalidErrorRate(f64),
    #[error("sensitivity + specificity must exceed 1 (got {se} + {sp})")]
    UninformativeTest { se: f64, sp: f64 },
    #[error("survival curve invalid: {0}")]
    InvalidSurvivalCurve(String),
}

/// Whether subjects keep reporting after a positive test or stop at the first one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FollowUpMode {
    /// Repeat testing: outcome vectors may contain positives followed by
    /// further results.
    FullSchedule,
    /// Self-report style data: at most one positive per subject and it is the
    /// final entry.
    StopAfterFirstPositive,
}

impl fmt::Display for FollowUpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FollowUpMode::FullSchedule => write!(f, "full-schedule"),
            FollowUpMode::StopAfterFirstPositive => write!(f, "stop-after-first-positive"),
        }
    }
}

/// The ordered distinct visit times defining the interval partition.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    taus: Vec<f64>,
}

impl TimeGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self, DataError> {
        if taus.is_empty() {
            return Err(DataError::EmptyGrid);
        }
        let mut prev = 0.0;
        for (k, &t) in taus.iter().enumerate() {
            if !(t > prev) || !t.is_finite() {
                return Err(DataError::NonIncreasingGrid(k));
            }
            prev = t;
        }
        Ok(Self { taus })
    }

    /// Number of grid points `J`.
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Number of intervals `J + 1`.
    pub fn n_intervals(&self) -> usize {
        self.taus.len() + 1
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// Index (0-based) of a visit time that matches a grid point exactly.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.taus
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
            .ok()
    }
}

/// One subject's observed data: error-prone outcome sequence, visit times and
/// baseline covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Error-prone binary test results, 1 = positive.
    pub y: Vec<u8>,
    /// Visit times, each equal to some grid point.
    pub t: Vec<f64>,
    /// Error-prone covariates (length p).
    pub x_star: Vec<f64>,
    /// Precisely measured covariates (length q).
    pub z: Vec<f64>,
    pub stratum: String,
    pub in_calibration_subset: bool,
    /// Reference measure with classical error, present iff in the calibration subset.
    pub x_double_star: Option<Vec<f64>>,
}

impl SubjectRecord {
    pub fn n_visits(&self) -> usize {
        self.y.len()
    }
}

/// A validation finding: one invariant violation with the offending subject.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub subject_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject_id {
            Some(id) => write!(f, "subject {id}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DiagnosticList(pub Vec<Diagnostic>);

impl fmt::Display for DiagnosticList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            writeln!(f, "  - {d}")?;
        }
        Ok(())
    }
}

/// An immutable analysis-ready cohort. Construct via [`ingest_long`] or
/// [`Cohort::from_parts`] followed by [`validate_cohort`].
#[derive(Debug, Clone)]
pub struct Cohort {
    grid: TimeGrid,
    subjects: Vec<SubjectRecord>,
    follow_up_mode: FollowUpMode,
    /// Grid index (0-based) of every visit, per subject.
    visit_idx: Vec<Vec<usize>>,
    /// Sorted distinct stratum labels.
    strata_labels: Vec<String>,
    /// Stratum index into `strata_labels`, per subject.
    stratum_idx: Vec<usize>,
}

impl Cohort {
    /// Assembles a cohort without validating invariants. Callers that build
    /// cohorts programmatically should run [`validate_cohort`] afterwards.
    pub fn from_parts(
        grid: TimeGrid,
        subjects: Vec<SubjectRecord>,
        follow_up_mode: FollowUpMode,
    ) -> Self {
        let visit_idx = subjects
            .iter()
            .map(|s| {
                s.t.iter()
                    .map(|&t| grid.index_of(t).unwrap_or(usize::MAX))
                    .collect()
            })
            .collect();
        let mut labels: Vec<String> = subjects.iter().map(|s| s.stratum.clone()).collect();
        labels.sort();
        labels.dedup();
        let stratum_idx = subjects
            .iter()
            .map(|s| labels.binary_search(&s.stratum).unwrap())
            .collect();
        Self {
            grid,
            subjects,
            follow_up_mode,
            visit_idx,
            strata_labels: labels,
            stratum_idx,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn follow_up_mode(&self) -> FollowUpMode {
        self.follow_up_mode
    }

    /// Grid indices (0-based) of subject `i`'s visits.
    pub fn visit_indices(&self, i: usize) -> &[usize] {
        &self.visit_idx[i]
    }

    pub fn strata_labels(&self) -> &[String] {
        &self.strata_labels
    }

    pub fn n_strata(&self) -> usize {
        self.strata_labels.len()
    }

    pub fn stratum_index(&self, i: usize) -> usize {
        self.stratum_idx[i]
    }

    pub fn n_error_prone_covariates(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.x_star.len())
    }

    pub fn n_precise_covariates(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.z.len())
    }

    pub fn calibration_subset_size(&self) -> usize {
        self.subjects
            .iter()
            .filter(|s| s.in_calibration_subset)
            .count()
    }

    /// Subjects with at least one positive test.
    pub fn n_test_positive(&self) -> usize {
        self.subjects
            .iter()
            .filter(|s| s.y.iter().any(|&y| y == 1))
            .count()
    }

    /// Structured text summary: subject count, J, grid, positives,
    /// calibration-subset size.
    pub fn summary(&self) -> String {
        let taus: Vec<String> = self.grid.taus().iter().map(|t| format!("{t}")).collect();
        format!(
            "subjects: {}\nvisit grid (J = {}): [{}]\nintervals: {}\nfollow-up mode: {}\nstrata: {}\ntest-positive subjects: {}\ncalibration subset: {}",
            self.n_subjects(),
            self.grid.len(),
            taus.join(", "),
            self.grid.n_intervals(),
            self.follow_up_mode,
            self.n_strata(),
            self.n_test_positive(),
            self.calibration_subset_size(),
        )
    }

    /// Serializes back to long-format rows (one per visit).
    pub fn to_long_rows(&self) -> Vec<LongRow> {
        let mut rows = Vec::new();
        for s in &self.subjects {
            for (k, (&y, &t)) in s.y.iter().zip(&s.t).enumerate() {
                let _ = k;
                rows.push(LongRow {
                    id: s.id.clone(),
                    subset_ind: s.in_calibration_subset,
                    x_star: s.x_star.clone(),
                    x_double_star: match &s.x_double_star {
                        Some(v) => v.iter().map(|&x| Some(x)).collect(),
                        None => vec![None; s.x_star.len()],
                    },
                    z: s.z.clone(),
                    stratum: s.stratum.clone(),
                    y,
                    t,
                });
            }
        }
        rows
    }

    /// Copy of this cohort truncated at every subject's first positive test.
    /// Used to feed repeat-testing data into estimators that require
    /// stop-after-first-positive sequences.
    pub fn truncated_at_first_positive(&self) -> Cohort {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let cut = s
                    .y
                    .iter()
                    .position(|&y| y == 1)
                    .map(|k| k + 1)
                    .unwrap_or(s.y.len());
                SubjectRecord {
                    id: s.id.clone(),
                    y: s.y[..cut].to_vec(),
                    t: s.t[..cut].to_vec(),
                    x_star: s.x_star.clone(),
                    z: s.z.clone(),
                    stratum: s.stratum.clone(),
                    in_calibration_subset: s.in_calibration_subset,
                    x_double_star: s.x_double_star.clone(),
                }
            })
            .collect();
        Cohort::from_parts(
            self.grid.clone(),
            subjects,
            FollowUpMode::StopAfterFirstPositive,
        )
    }
}

/// Known misclassification rates of the outcome test, with optional
/// per-stratum overrides of (sensitivity, specificity).
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeErrorModel {
    pub se: f64,
    pub sp: f64,
    /// Baseline negative predictive value; 1 means baseline reports are trusted.
    pub eta: f64,
    pub per_stratum: BTreeMap<String, (f64, f64)>,
}

impl OutcomeErrorModel {
    pub fn new(se: f64, sp: f64, eta: f64) -> Result<Self, DataError> {
        for v in [se, sp, eta] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(DataError::InvalidErrorRate(v));
            }
        }
        if se + sp <= 1.0 {
            return Err(DataError::UninformativeTest { se, sp });
        }
        Ok(Self {
            se,
            sp,
            eta,
            per_stratum: BTreeMap::new(),
        })
    }

    pub fn perfect() -> Self {
        Self {
            se: 1.0,
            sp: 1.0,
            eta: 1.0,
            per_stratum: BTreeMap::new(),
        }
    }

    pub fn with_stratum_override(mut self, stratum: &str, se: f64, sp: f64) -> Result<Self, DataError> {
        for v in [se, sp] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(DataError::InvalidErrorRate(v));
            }
        }
        if se + sp <= 1.0 {
            return Err(DataError::UninformativeTest { se, sp });
        }
        self.per_stratum.insert(stratum.to_string(), (se, sp));
        Ok(self)
    }

    /// (se, sp) effective for a stratum label.
    pub fn rates_for(&self, stratum: &str) -> (f64, f64) {
        self.per_stratum
            .get(stratum)
            .copied()
            .unwrap_or((self.se, self.sp))
    }
}

/// Log hazard ratios, split into error-prone and precise blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub beta_x: Vec<f64>,
    pub beta_z: Vec<f64>,
}

impl CoefficientVector {
    pub fn new(beta_x: Vec<f64>, beta_z: Vec<f64>) -> Self {
        Self { beta_x, beta_z }
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            beta_x: vec![0.0; p],
            beta_z: vec![0.0; q],
        }
    }

    pub fn from_slice(v: &[f64], p: usize) -> Self {
        Self {
            beta_x: v[..p].to_vec(),
            beta_z: v[p..].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.beta_x.len() + self.beta_z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn packed(&self) -> Vec<f64> {
        let mut v = self.beta_x.clone();
        v.extend_from_slice(&self.beta_z);
        v
    }
}

/// Baseline survival probabilities `S_1 >= ... > S_{J+1} > 0`. `S_1` is pinned
/// to 1 unless `s1_free` (the baseline-NPV model estimates it).
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    s: Vec<f64>,
    s1_free: bool,
}

impl SurvivalCurve {
    pub fn new(s: Vec<f64>, s1_free: bool) -> Result<Self, DataError> {
        let curve = Self { s, s1_free };
        curve.check()?;
        Ok(curve)
    }

    /// Builds without checking order/positivity; used for boundary cases the
    /// validator is expected to flag.
    pub fn new_unchecked(s: Vec<f64>, s1_free: bool) -> Self {
        Self { s, s1_free }
    }

    fn check(&self) -> Result<(), DataError> {
        if self.s.is_empty() {
            return Err(DataError::InvalidSurvivalCurve("empty".into()));
        }
        if !self.s1_free && self.s[0] != 1.0 {
            return Err(DataError::InvalidSurvivalCurve(format!(
                "S_1 must be exactly 1 unless free (got {})",
                self.s[0]
            )));
        }
        if self.s[0] > 1.0 {
            return Err(DataError::InvalidSurvivalCurve(format!(
                "S_1 must be <= 1 (got {})",
                self.s[0]
            )));
        }
        let mut prev = f64::INFINITY;
        for (j, &v) in self.s.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() || v >= prev && j > 0 {
                return Err(DataError::InvalidSurvivalCurve(format!(
                    "entries must satisfy S_1 > S_2 > ... > S_(J+1) > 0 (index {j})"
                )));
            }
            prev = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.check()
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    pub fn s1_free(&self) -> bool {
        self.s1_free
    }

    pub fn n_intervals(&self) -> usize {
        self.s.len()
    }

    /// Interval masses `theta_j = S_j - S_{j+1}` with `S_{J+2} = 0`.
    pub fn interval_masses(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.s.len());
        for j in 0..self.s.len() {
            let next = if j + 1 < self.s.len() { self.s[j + 1] } else { 0.0 };
            theta.push(self.s[j] - next);
        }
        theta
    }
}

/// One long-format row: a single (subject, visit) pair with baseline
/// covariates replicated.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub id: String,
    pub subset_ind: bool,
    pub x_star: Vec<f64>,
    /// Reference measure per error-prone covariate; `None` outside the subset.
    pub x_double_star: Vec<Option<f64>>,
    pub z: Vec<f64>,
    pub stratum: String,
    pub y: u8,
    pub t: f64,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Caller-chosen follow-up mode. `None` detects from data: stop mode when
    /// every subject has at most one positive and it is final.
    pub mode: Option<FollowUpMode>,
    /// When set, visit times within `tol` of each other are snapped to the
    /// smallest time in their cluster before grid construction.
    pub snap_tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SnapEvent {
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub mode: FollowUpMode,
    pub snapped: Vec<SnapEvent>,
}

/// Ingests long-format rows into a [`Cohort`].
///
/// Rows are grouped by id in first-appearance order and sorted by `t` within
/// each subject. The grid is the sorted set union of observed visit times.
/// Baseline covariates must be constant across a subject's rows.
pub fn ingest_long(rows: &[LongRow], opts: &IngestOptions) -> Result<(Cohort, IngestReport), DataError> {
    if rows.is_empty() {
        return Err(DataError::EmptyCohort);
    }

    // Optional snap-to-grid pre-pass: cluster sorted distinct times greedily.
    let mut snapped = Vec::new();
    let mut remap: BTreeMap<u64, f64> = BTreeMap::new();
    if let Some(tol) = opts.snap_tol {
        let mut times: Vec<f64> = rows.iter().map(|r| r.t).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let mut rep = f64::NEG_INFINITY;
        for &t in &times {
            if t - rep > tol {
                rep = t;
            } else if t != rep {
                remap.insert(t.to_bits(), rep);
                snapped.push(SnapEvent { from: t, to: rep });
                log::warn!("snap-to-grid: visit time {t} snapped to {rep}");
            }
        }
    }
    let snap = |t: f64| remap.get(&t.to_bits()).copied().unwrap_or(t);

    // Group rows by id, preserving first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&LongRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(&r.id) {
            order.push(r.id.clone());
        }
        groups.entry(r.id.clone()).or_default().push(r);
    }

    let mut all_times: Vec<f64> = Vec::new();
    let mut subjects = Vec::with_capacity(order.len());
    for id in &order {
        let mut rws = groups.remove(id).unwrap();
        rws.sort_by(|a, b| snap(a.t).partial_cmp(&snap(b.t)).unwrap());
        let first = rws[0];

        let mut y = Vec::with_capacity(rws.len());
        let mut t = Vec::with_capacity(rws.len());
        let mut prev_t = f64::NEG_INFINITY;
        for r in &rws {
            if r.x_star != first.x_star || r.z != first.z {
                let column = if r.x_star != first.x_star { "x*" } else { "z" };
                return Err(DataError::CovariateDriftWithinSubject {
                    id: id.clone(),
                    column: column.into(),
                });
            }
            if r.stratum != first.stratum || r.subset_ind != first.subset_ind {
                return Err(DataError::CovariateDriftWithinSubject {
                    id: id.clone(),
                    column: if r.stratum != first.stratum {
                        "stratum".into()
                    } else {
                        "subset_ind".into()
                    },
                });
            }
            if r.y > 1 {
                return Err(DataError::InvalidOutcome {
                    id: id.clone(),
                    value: r.y as f64,
                });
            }
            let tt = snap(r.t);
            if tt <= prev_t {
                return Err(DataError::NonmonotoneVisits { id: id.clone() });
            }
            prev_t = tt;
            y.push(r.y);
            t.push(tt);
            all_times.push(tt);
        }

        let x_double_star = if first.subset_ind {
            let mut vals = Vec::with_capacity(first.x_double_star.len());
            for (k, v) in first.x_double_star.iter().enumerate() {
                match v {
                    Some(x) => vals.push(*x),
                    None => {
                        return Err(DataError::MissingCalibrationMeasure {
                            id: id.clone(),
                            column: format!("x_{}_starstar", k + 1),
                        })
                    }
                }
            }
            Some(vals)
        } else {
            None
        };

        subjects.push(SubjectRecord {
            id: id.clone(),
            y,
            t,
            x_star: first.x_star.clone(),
            z: first.z.clone(),
            stratum: first.stratum.clone(),
            in_calibration_subset: first.subset_ind,
            x_double_star,
        });
    }

    all_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all_times.dedup();
    let grid = TimeGrid::new(all_times)?;

    let detected = detect_mode(&subjects);
    let mode = opts.mode.unwrap_or(detected);
    let cohort = Cohort::from_parts(grid, subjects, mode);
    let diags = validate_cohort(&cohort);
    if !diags.is_empty() {
        return Err(DataError::InvalidCohort(DiagnosticList(diags)));
    }
    Ok((cohort, IngestReport { mode, snapped }))
}

fn detect_mode(subjects: &[SubjectRecord]) -> FollowUpMode {
    let stop_compatible = subjects.iter().all(|s| {
        let n_pos = s.y.iter().filter(|&&y| y == 1).count();
        n_pos == 0 || (n_pos == 1 && *s.y.last().unwrap() == 1)
    });
    if stop_compatible {
        FollowUpMode::StopAfterFirstPositive
    } else {
        FollowUpMode::FullSchedule
    }
}

/// Checks every cohort invariant, returning one diagnostic per violation.
/// An empty list means the cohort is valid.
pub fn validate_cohort(cohort: &Cohort) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let grid = cohort.grid();
    if grid.is_empty() {
        diags.push(Diagnostic {
            subject_id: None,
            message: "time grid is empty".into(),
        });
    }
    let (p, q) = (
        cohort.n_error_prone_covariates(),
        cohort.n_precise_covariates(),
    );
    for s in cohort.subjects() {
        if s.y.len() != s.t.len() || s.y.is_empty() {
            diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: format!(
                    "outcome/visit lengths invalid (|y| = {}, |t| = {})",
                    s.y.len(),
                    s.t.len()
                ),
            });
            continue;
        }
        let mut prev = f64::NEG_INFINITY;
        for &t in &s.t {
            if t <= prev {
                diags.push(Diagnostic {
                    subject_id: Some(s.id.clone()),
                    message: "visit times not strictly increasing".into(),
                });
                break;
            }
            prev = t;
        }
        for &t in &s.t {
            if grid.index_of(t).is_none() {
                diags.push(Diagnostic {
                    subject_id: Some(s.id.clone()),
                    message: format!("visit time {t} does not match any grid point"),
                });
            }
        }
        if !grid.is_empty() && s.t.iter().all(|&t| t < grid.taus()[0]) {
            diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: "all visits precede the first grid point".into(),
            });
        }
        if s.y.iter().any(|&y| y > 1) {
            diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: "outcomes must be 0 or 1".into(),
            });
        }
        if cohort.follow_up_mode() == FollowUpMode::StopAfterFirstPositive {
            let n_pos = s.y.iter().filter(|&&y| y == 1).count();
            let ok = n_pos == 0 || (n_pos == 1 && *s.y.last().unwrap() == 1);
            if !ok {
                diags.push(Diagnostic {
                    subject_id: Some(s.id.clone()),
                    message:
                        "stop-after-first-positive requires at most one positive, in final position"
                            .into(),
                });
            }
        }
        if s.x_star.len() != p {
            diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: format!("expected {p} error-prone covariates, got {}", s.x_star.len()),
            });
        }
        if s.z.len() != q {
            diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: format!("expected {q} precise covariates, got {}", s.z.len()),
            });
        }
        if s.x_star.iter().chain(&s.z).any(|v| !v.is_finite()) {
            diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: "covariates must be finite".into(),
            });
        }
        match (&s.x_double_star, s.in_calibration_subset) {
            (None, true) => diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: "in calibration subset but reference measure missing".into(),
            }),
            (Some(_), false) => diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: "reference measure present outside calibration subset".into(),
            }),
            (Some(v), true) if v.len() != p => diags.push(Diagnostic {
                subject_id: Some(s.id.clone()),
                message: format!("expected {p} reference measures, got {}", v.len()),
            }),
            _ => {}
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, t: f64, y: u8) -> LongRow {
        LongRow {
            id: id.into(),
            subset_ind: false,
            x_star: vec![0.5],
            x_double_star: vec![None],
            z: vec![1.0, -1.0],
            stratum: "all".into(),
            y,
            t,
        }
    }

    #[test]
    fn grid_from_union_of_times() {
        // two subjects with visit sets {2,5} and {5,7,8} -> grid (2,5,7,8)
        let rows = vec![
            row("a", 2.0, 0),
            row("a", 5.0, 0),
            row("b", 5.0, 0),
            row("b", 7.0, 0),
            row("b", 8.0, 1),
        ];
        let (cohort, _) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        assert_eq!(cohort.grid().taus(), &[2.0, 5.0, 7.0, 8.0]);
        assert_eq!(cohort.grid().len(), 4);
        assert_eq!(cohort.n_subjects(), 2);
        assert_eq!(cohort.visit_indices(1), &[1, 2, 3]);
    }

    #[test]
    fn single_subject_single_visit() {
        let rows = vec![row("a", 3.0, 0)];
        let (cohort, rep) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        assert_eq!(cohort.grid().len(), 1);
        assert_eq!(cohort.subjects()[0].n_visits(), 1);
        assert_eq!(rep.mode, FollowUpMode::StopAfterFirstPositive);
    }

    #[test]
    fn stop_mode_detection_and_final_positive() {
        let rows = vec![
            row("a", 1.0, 0),
            row("a", 2.0, 0),
            row("a", 3.0, 0),
            row("a", 4.0, 1),
        ];
        let (cohort, rep) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        assert_eq!(rep.mode, FollowUpMode::StopAfterFirstPositive);
        assert_eq!(cohort.subjects()[0].n_visits(), 4);
    }

    #[test]
    fn full_schedule_detection() {
        let rows = vec![row("a", 1.0, 1), row("a", 2.0, 0)];
        let (cohort, rep) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        assert_eq!(rep.mode, FollowUpMode::FullSchedule);
        assert_eq!(cohort.follow_up_mode(), FollowUpMode::FullSchedule);
    }

    #[test]
    fn stop_override_on_incompatible_data_fails_validation() {
        let rows = vec![row("a", 1.0, 1), row("a", 2.0, 0)];
        let opts = IngestOptions {
            mode: Some(FollowUpMode::StopAfterFirstPositive),
            snap_tol: None,
        };
        let err = ingest_long(&rows, &opts).unwrap_err();
        assert!(matches!(err, DataError::InvalidCohort(_)));
    }

    #[test]
    fn row_order_within_subject_is_irrelevant() {
        let fwd = vec![row("a", 1.0, 0), row("a", 2.0, 1)];
        let rev = vec![row("a", 2.0, 1), row("a", 1.0, 0)];
        let (c1, _) = ingest_long(&fwd, &IngestOptions::default()).unwrap();
        let (c2, _) = ingest_long(&rev, &IngestOptions::default()).unwrap();
        assert_eq!(c1.subjects(), c2.subjects());
    }

    #[test]
    fn duplicate_visit_times_rejected() {
        let rows = vec![row("a", 1.0, 0), row("a", 1.0, 0)];
        let err = ingest_long(&rows, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::NonmonotoneVisits { .. }));
    }

    #[test]
    fn covariate_drift_rejected() {
        let mut r2 = row("a", 2.0, 0);
        r2.x_star = vec![0.75];
        let rows = vec![row("a", 1.0, 0), r2];
        let err = ingest_long(&rows, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::CovariateDriftWithinSubject { .. }));
    }

    #[test]
    fn missing_reference_measure_rejected() {
        let mut r = row("a", 1.0, 0);
        r.subset_ind = true;
        let err = ingest_long(&[r], &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::MissingCalibrationMeasure { .. }));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            ingest_long(&[], &IngestOptions::default()),
            Err(DataError::EmptyCohort)
        ));
    }

    #[test]
    fn snap_to_grid_merges_near_times() {
        let rows = vec![row("a", 1.0, 0), row("b", 1.004, 0), row("b", 2.0, 0)];
        let opts = IngestOptions {
            mode: None,
            snap_tol: Some(0.01),
        };
        let (cohort, rep) = ingest_long(&rows, &opts).unwrap();
        assert_eq!(cohort.grid().taus(), &[1.0, 2.0]);
        assert_eq!(rep.snapped.len(), 1);
        assert_eq!(rep.snapped[0].to, 1.0);
    }

    #[test]
    fn validate_flags_off_grid_visit() {
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let s = SubjectRecord {
            id: "a".into(),
            y: vec![0],
            t: vec![3.5],
            x_star: vec![0.0],
            z: vec![],
            stratum: "all".into(),
            in_calibration_subset: false,
            x_double_star: None,
        };
        let cohort = Cohort::from_parts(grid, vec![s], FollowUpMode::FullSchedule);
        let diags = validate_cohort(&cohort);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("grid"));
    }

    #[test]
    fn validate_flags_nonfinal_positive_in_stop_mode() {
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let s = SubjectRecord {
            id: "a".into(),
            y: vec![1, 0],
            t: vec![1.0, 2.0],
            x_star: vec![0.0],
            z: vec![],
            stratum: "all".into(),
            in_calibration_subset: false,
            x_double_star: None,
        };
        let cohort = Cohort::from_parts(grid, vec![s], FollowUpMode::StopAfterFirstPositive);
        let diags = validate_cohort(&cohort);
        assert_eq!(diags.len(), 1);
    }

    #[test]
    fn valid_cohort_yields_no_diagnostics() {
        let rows = vec![row("a", 1.0, 0), row("a", 2.0, 1), row("b", 2.0, 0)];
        let (cohort, _) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        assert!(validate_cohort(&cohort).is_empty());
    }

    #[test]
    fn long_format_round_trip() {
        let mut r1 = row("a", 1.0, 0);
        r1.subset_ind = true;
        r1.x_double_star = vec![Some(0.42)];
        let mut r2 = r1.clone();
        r2.t = 2.0;
        r2.y = 1;
        let rows = vec![r1, r2, row("b", 2.0, 0)];
        let (cohort, _) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        let back = cohort.to_long_rows();
        let (cohort2, _) = ingest_long(&back, &IngestOptions::default()).unwrap();
        assert_eq!(cohort.subjects(), cohort2.subjects());
        assert_eq!(cohort.grid(), cohort2.grid());
    }

    #[test]
    fn survival_curve_invariants() {
        assert!(SurvivalCurve::new(vec![1.0, 0.6, 0.3], false).is_ok());
        assert!(SurvivalCurve::new(vec![0.9, 0.6], false).is_err());
        assert!(SurvivalCurve::new(vec![0.9, 0.6], true).is_ok());
        assert!(SurvivalCurve::new(vec![1.0, 0.6, 0.6], false).is_err());
        assert!(SurvivalCurve::new(vec![1.0, 0.6, -0.1], false).is_err());
        let c = SurvivalCurve::new(vec![1.0, 0.6, 0.3], false).unwrap();
        let theta = c.interval_masses();
        assert!((theta[0] - 0.4).abs() < 1e-15);
        assert!((theta[1] - 0.3).abs() < 1e-15);
        assert!((theta[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn error_model_bounds() {
        assert!(OutcomeErrorModel::new(0.8, 0.9, 1.0).is_ok());
        assert!(OutcomeErrorModel::new(0.0, 0.9, 1.0).is_err());
        assert!(OutcomeErrorModel::new(0.4, 0.6, 1.0).is_err());
        assert!(OutcomeErrorModel::new(0.8, 0.9, 1.2).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn ingest_invariant_under_within_subject_reorder(
            perm in {
                use proptest::strategy::Strategy as _;
                proptest::strategy::Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()
            },
            y_bits in 0u8..64,
        ) {
            let ordered: Vec<LongRow> = (0..6)
                .map(|k| row("a", (k + 1) as f64, (y_bits >> k) & 1))
                .collect();
            let shuffled: Vec<LongRow> = perm.iter().map(|&k| ordered[k].clone()).collect();
            let (c1, _) = ingest_long(&ordered, &IngestOptions::default()).unwrap();
            let (c2, _) = ingest_long(&shuffled, &IngestOptions::default()).unwrap();
            proptest::prop_assert_eq!(c1.subjects(), c2.subjects());
            proptest::prop_assert_eq!(c1.grid(), c2.grid());
        }
    }

    #[test]
    fn truncation_cuts_after_first_positive() {
        let rows = vec![
            row("a", 1.0, 0),
            row("a", 2.0, 1),
            row("a", 3.0, 0),
            row("a", 4.0, 1),
        ];
        let (cohort, _) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        assert_eq!(cohort.follow_up_mode(), FollowUpMode::FullSchedule);
        let cut = cohort.truncated_at_first_positive();
        assert_eq!(cut.subjects()[0].y, vec![0, 1]);
        assert_eq!(cut.follow_up_mode(), FollowUpMode::StopAfterFirstPositive);
        assert!(validate_cohort(&cut).is_empty());
    }
}
