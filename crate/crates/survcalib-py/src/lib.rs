//! Python bindings: cohort ingestion, the calibration-corrected survival
//! fits, and the simulation harness.
//!
//! Build the extension with
//! `cargo build --release -p survcalib-py --features extension-module`
//! and import the resulting `survcalib_py` shared library.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use survcalib::calibration::{self, CalibrationModel};
use survcalib::data::{
    ingest_long, validate_cohort, FollowUpMode, IngestOptions, OutcomeErrorModel,
};
use survcalib::io;
use survcalib::mle::FitOptions;
use survcalib::pipeline::{self, MethodFit};
use survcalib::sim::{self, presets, Estimator, RunOptions, ScenarioConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// An immutable analysis-ready cohort.
#[pyclass(name = "Cohort")]
struct PyCohort {
    inner: survcalib::data::Cohort,
    columns: io::ColumnSpec,
}

#[pymethods]
impl PyCohort {
    /// Reads a long-format CSV. Column lists default to the `x_<k>_star` /
    /// `z_<k>` conventions with an optional `stratum` column.
    #[staticmethod]
    #[pyo3(signature = (path, x_star=None, z=None, stratum=None, mode=None, snap_tol=None))]
    fn from_csv(
        path: PathBuf,
        x_star: Option<Vec<String>>,
        z: Option<Vec<String>>,
        stratum: Option<String>,
        mode: Option<String>,
        snap_tol: Option<f64>,
    ) -> PyResult<Self> {
        let cols = io::resolve_column_spec(
            &path,
            &x_star.unwrap_or_default(),
            &z.unwrap_or_default(),
            stratum.as_deref(),
        )
        .map_err(|e| PyIOError::new_err(e.to_string()))?;
        let rows =
            io::read_long_csv(&path, &cols).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mode = match mode.as_deref() {
            None => None,
            Some("full") => Some(FollowUpMode::FullSchedule),
            Some("stop") => Some(FollowUpMode::StopAfterFirstPositive),
            Some(other) => {
                return Err(value_err(format!(
                    "mode must be 'full' or 'stop', got {other:?}"
                )))
            }
        };
        let (cohort, _) =
            ingest_long(&rows, &IngestOptions { mode, snap_tol }).map_err(value_err)?;
        Ok(Self {
            inner: cohort,
            columns: cols,
        })
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }

    #[getter]
    fn n_strata(&self) -> usize {
        self.inner.n_strata()
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid().taus().to_vec()
    }

    #[getter]
    fn follow_up_mode(&self) -> String {
        self.inner.follow_up_mode().to_string()
    }

    #[getter]
    fn calibration_subset_size(&self) -> usize {
        self.inner.calibration_subset_size()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.columns
            .x_star
            .iter()
            .chain(self.columns.z.iter())
            .cloned()
            .collect()
    }

    fn summary(&self) -> String {
        self.inner.summary()
    }

    /// Validation diagnostics; an empty list means the cohort is valid.
    fn validate(&self) -> Vec<String> {
        validate_cohort(&self.inner)
            .into_iter()
            .map(|d| d.to_string())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Cohort(n={}, J={}, mode={})",
            self.inner.n_subjects(),
            self.inner.grid().len(),
            self.inner.follow_up_mode()
        )
    }
}

/// Fitted coefficients, standard errors and survival estimates.
#[pyclass(name = "FitResult")]
struct PyFitResult {
    #[pyo3(get)]
    method: String,
    #[pyo3(get)]
    covariates: Vec<String>,
    #[pyo3(get)]
    beta: Vec<f64>,
    #[pyo3(get)]
    standard_errors: Vec<f64>,
    #[pyo3(get)]
    beta_covariance: Vec<Vec<f64>>,
    /// Baseline survival per stratum (likelihood-based fits only).
    #[pyo3(get)]
    survival: Option<Vec<Vec<f64>>>,
    #[pyo3(get)]
    loglik: Option<f64>,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    warnings: Vec<String>,
}

#[pymethods]
impl PyFitResult {
    /// Hazard ratios with 95% Wald intervals for an exposure increment.
    #[pyo3(signature = (increment=1.0))]
    fn hazard_ratios(&self, increment: f64) -> Vec<(String, f64, f64, f64)> {
        const Z: f64 = 1.959963984540054;
        self.covariates
            .iter()
            .zip(self.beta.iter().zip(&self.standard_errors))
            .map(|(name, (b, s))| {
                (
                    name.clone(),
                    (b * increment).exp(),
                    ((b - Z * s) * increment).exp(),
                    ((b + Z * s) * increment).exp(),
                )
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(method={}, beta={:?}, converged={})",
            self.method, self.beta, self.converged
        )
    }
}

fn method_fit_to_py(fit: MethodFit, method: &str, covariates: Vec<String>) -> PyFitResult {
    let k = fit.beta.len();
    PyFitResult {
        method: method.to_string(),
        covariates,
        standard_errors: fit.standard_errors(),
        beta_covariance: (0..k)
            .map(|r| (0..k).map(|c| fit.beta_covariance[(r, c)]).collect())
            .collect(),
        beta: fit.beta,
        survival: fit
            .survival
            .map(|curves| curves.iter().map(|c| c.values().to_vec()).collect()),
        loglik: fit.loglik,
        converged: fit.converged,
        iterations: fit.iterations,
        warnings: fit.warnings,
    }
}

/// Fitted calibration regression.
#[pyclass(name = "Calibration")]
struct PyCalibration {
    inner: CalibrationModel,
    x_star_columns: Vec<String>,
    z_columns: Vec<String>,
}

#[pymethods]
impl PyCalibration {
    #[getter]
    fn delta0(&self) -> Vec<f64> {
        self.inner.delta0.clone()
    }

    #[getter]
    fn delta1(&self) -> Vec<Vec<f64>> {
        self.inner.delta1.clone()
    }

    #[getter]
    fn delta2(&self) -> Vec<Vec<f64>> {
        self.inner.delta2.clone()
    }

    #[getter]
    fn n_c(&self) -> usize {
        self.inner.n_c
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_calibration(
            &path,
            &io::CalibrationFile {
                x_star_columns: self.x_star_columns.clone(),
                z_columns: self.z_columns.clone(),
                model: self.inner.clone(),
            },
        )
        .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let file = io::read_calibration(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            inner: file.model,
            x_star_columns: file.x_star_columns,
            z_columns: file.z_columns,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Calibration(n_c={}, delta1={:?})",
            self.inner.n_c, self.inner.delta1
        )
    }
}

/// Fits the calibration regression on the cohort's calibration subset.
#[pyfunction]
fn fit_calibration(cohort: &PyCohort) -> PyResult<PyCalibration> {
    let model = calibration::fit_calibration(&cohort.inner).map_err(value_err)?;
    Ok(PyCalibration {
        inner: model,
        x_star_columns: cohort.columns.x_star.clone(),
        z_columns: cohort.columns.z.clone(),
    })
}

/// Fits an outcome model.
///
/// `method` is one of "naive", "outcome_only", "covariate_only", "proposed".
/// Sensitivity/specificity are required for the likelihood-based methods; a
/// calibration (object or fitted from the cohort's subset) is required for
/// the corrected methods.
#[pyfunction]
#[pyo3(signature = (cohort, method, se=None, sp=None, eta=1.0, calibration=None, tol_g=1e-6, max_iter=500))]
#[allow(clippy::too_many_arguments)]
fn fit(
    cohort: &PyCohort,
    method: &str,
    se: Option<f64>,
    sp: Option<f64>,
    eta: f64,
    calibration: Option<&PyCalibration>,
    tol_g: f64,
    max_iter: usize,
) -> PyResult<PyFitResult> {
    let stratified = cohort.inner.n_strata() > 1;
    let covariates = cohort.covariate_names();
    let options = FitOptions {
        tol_g,
        max_iter,
        ..FitOptions::default()
    };
    let error_model = || -> PyResult<OutcomeErrorModel> {
        match (se, sp) {
            (Some(se), Some(sp)) => OutcomeErrorModel::new(se, sp, eta).map_err(value_err),
            _ => Err(value_err(
                "se and sp are required for outcome_only and proposed fits",
            )),
        }
    };
    let calib = |calibration: Option<&PyCalibration>| -> PyResult<CalibrationModel> {
        match calibration {
            Some(c) => Ok(c.inner.clone()),
            None => calibration::fit_calibration(&cohort.inner).map_err(value_err),
        }
    };
    let fit = match method {
        "naive" | "true" => pipeline::naive_method_fit(&cohort.inner, stratified),
        "outcome_only" => {
            pipeline::outcome_only_method_fit(&cohort.inner, &error_model()?, stratified, &options)
        }
        "covariate_only" => {
            pipeline::covariate_only_method_fit(&cohort.inner, &calib(calibration)?, stratified)
        }
        "proposed" => pipeline::proposed_method_fit(
            &cohort.inner,
            &error_model()?,
            &calib(calibration)?,
            stratified,
            &options,
        ),
        other => {
            return Err(value_err(format!(
                "unknown method {other:?}; expected naive, outcome_only, covariate_only or proposed"
            )))
        }
    }
    .map_err(runtime_err)?;
    Ok(method_fit_to_py(fit, method, covariates))
}

/// Names of the built-in simulation presets.
#[pyfunction]
fn list_presets() -> Vec<String> {
    presets::preset_names()
}

/// A preset's scenario configuration as TOML text.
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    Ok(presets::preset(name).map_err(value_err)?.to_toml_string())
}

fn parse_config(config_toml: &str) -> PyResult<ScenarioConfig> {
    ScenarioConfig::from_toml_str(config_toml).map_err(value_err)
}

/// Generates one replication of a scenario (TOML text) as a cohort.
#[pyfunction]
fn generate_cohort(config_toml: &str, rep: u64) -> PyResult<PyCohort> {
    let cfg = parse_config(config_toml)?;
    let sim = sim::generate_cohort(&cfg, rep);
    let n_z = 2 + cfg.binary_covariates.len();
    let columns = io::ColumnSpec::new(
        vec!["x_1_star".into()],
        (1..=n_z).map(|k| format!("z_{k}")).collect(),
        if cfg.n_strata() > 1 {
            Some("stratum".into())
        } else {
            None
        },
    );
    Ok(PyCohort {
        inner: sim.observed,
        columns,
    })
}

/// Runs a scenario (TOML text) and returns per-estimator metric tables.
#[pyfunction]
#[pyo3(signature = (config_toml, estimators=None, replications=None, n=None, n_c=None, seed=None))]
fn run_scenario(
    py: Python<'_>,
    config_toml: &str,
    estimators: Option<Vec<String>>,
    replications: Option<usize>,
    n: Option<usize>,
    n_c: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Py<PyDict>> {
    let mut cfg = parse_config(config_toml)?;
    if let Some(r) = replications {
        cfg.replications = r;
    }
    if let Some(n) = n {
        cfg.n = n;
    }
    if let Some(n_c) = n_c {
        cfg.n_c = n_c;
    }
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let ests: Vec<Estimator> = match estimators {
        None => vec![Estimator::Proposed, Estimator::Naive],
        Some(names) => names
            .iter()
            .map(|s| {
                Estimator::parse(s).ok_or_else(|| value_err(format!("unknown estimator {s:?}")))
            })
            .collect::<PyResult<_>>()?,
    };
    let result = sim::run_scenario(&cfg, &ests, &RunOptions::default()).map_err(runtime_err)?;

    let out = PyDict::new(py);
    out.set_item("scenario", &result.scenario)?;
    out.set_item("seed", result.seed)?;
    out.set_item("config_hash", &result.config_hash)?;
    out.set_item("replications", result.n_replications)?;
    if let Some(d) = result.mean_delta1 {
        out.set_item("mean_delta1", d)?;
    }
    let tables = PyDict::new(py);
    for table in &result.tables {
        let t = PyDict::new(py);
        t.set_item("n_used", table.n_used)?;
        t.set_item("n_failed", table.n_failed)?;
        let params = PyDict::new(py);
        for p in &table.params {
            let m = PyDict::new(py);
            m.set_item("true_value", p.true_value)?;
            m.set_item("mean_estimate", p.mean_estimate)?;
            m.set_item("pct_bias", p.pct_bias)?;
            m.set_item("ase", p.ase)?;
            m.set_item("ese", p.ese)?;
            m.set_item("coverage", p.coverage)?;
            m.set_item("type1_error", p.type1_error)?;
            params.set_item(&p.name, m)?;
        }
        t.set_item("params", params)?;
        tables.set_item(&table.estimator, t)?;
    }
    out.set_item("tables", tables)?;
    Ok(out.into())
}

#[pymodule]
fn survcalib_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCohort>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyCalibration>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(list_presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
