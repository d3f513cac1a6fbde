//! Monte Carlo engine: synthetic cohort generation and replication harness
//! computing percent bias, average/empirical standard errors, coverage and
//! type I error for the competing estimators.

pub mod presets;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Bernoulli, Distribution, Exp, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    Cohort, FollowUpMode, OutcomeErrorModel, SubjectRecord, TimeGrid,
};
use crate::mle::FitOptions;
use crate::pipeline::{self, PipelineError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario file error: {0}")]
    Format(String),
    #[error("unknown preset `{0}`; available: {1}")]
    UnknownPreset(String, String),
}

/// Distribution of the systematic-error term in the error-prone covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorDist {
    Normal { sigma2: f64 },
    StudentT { df: f64 },
    NormalMixture {
        weight1: f64,
        mean1: f64,
        var1: f64,
        mean2: f64,
        var2: f64,
    },
}

/// Extra independent Bernoulli covariate entering both the measurement-error
/// model (via `alpha`) and the hazard (via `beta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryCovariate {
    pub prob: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn default_cov_matrix() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, 0.3, 0.3],
        vec![0.3, 1.0, 0.3],
        vec![0.3, 0.3, 1.0],
    ]
}

fn default_alpha() -> Vec<f64> {
    vec![1.0, 0.8, 0.3, 0.5]
}

fn default_epsilon_var() -> f64 {
    0.06
}

fn default_eta() -> f64 {
    1.0
}

fn default_seed() -> u64 {
    20171
}

/// Full description of one simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    /// Main-study size.
    pub n: usize,
    /// Calibration subset size (simple random sample of the main study).
    pub n_c: usize,
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
    pub visit_times: Vec<f64>,
    /// One rate per stratum; a single entry means no stratification.
    pub baseline_hazards: Vec<f64>,
    /// True log hazard ratios for (X1, Z1, Z2).
    pub beta_true: Vec<f64>,
    #[serde(default = "default_cov_matrix")]
    pub covariate_covariance: Vec<Vec<f64>>,
    /// Linear measurement-error coefficients (alpha0..alpha3) for
    /// `X* = a0 + a1 X1 + a2 Z1 + a3 Z2 + e`.
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    pub error_dist: ErrorDist,
    /// Variance of the classical error in the reference measure X**.
    #[serde(default = "default_epsilon_var")]
    pub epsilon_var: f64,
    pub se: f64,
    pub sp: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub p_miss: f64,
    #[serde(default)]
    pub stop_after_first_positive: bool,
    #[serde(default)]
    pub binary_covariates: Vec<BinaryCovariate>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::InvalidScenario(m));
        if self.n == 0 {
            return err("n must be positive".into());
        }
        if self.visit_times.is_empty()
            || self
                .visit_times
                .windows(2)
                .any(|w| w[1] <= w[0])
            || self.visit_times[0] <= 0.0
        {
            return err("visit_times must be strictly increasing and positive".into());
        }
        if self.baseline_hazards.is_empty() || self.baseline_hazards.iter().any(|&h| h <= 0.0) {
            return err("baseline_hazards must be positive".into());
        }
        if self.beta_true.len() != 3 {
            return err("beta_true must have three entries (X1, Z1, Z2)".into());
        }
        for v in [self.se, self.sp, self.eta] {
            if !(v > 0.0 && v <= 1.0) {
                return err(format!("se/sp/eta must lie in (0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_miss) {
            return err("p_miss must lie in [0, 1]".into());
        }
        if self.alpha.len() != 4 {
            return err("alpha must have four entries".into());
        }
        if self.covariate_covariance.len() != 3
            || self.covariate_covariance.iter().any(|r| r.len() != 3)
        {
            return err("covariate_covariance must be 3 x 3".into());
        }
        for b in &self.binary_covariates {
            if !(0.0..=1.0).contains(&b.prob) {
                return err("binary covariate probability must lie in [0, 1]".into());
            }
        }
        if self.n_c > self.n {
            return err("n_c cannot exceed n".into());
        }
        Ok(())
    }

    pub fn n_strata(&self) -> usize {
        self.baseline_hazards.len()
    }

    /// Full true coefficient vector: (X1, Z1, Z2) then the binary covariates.
    pub fn full_beta_true(&self) -> Vec<f64> {
        let mut b = self.beta_true.clone();
        b.extend(self.binary_covariates.iter().map(|c| c.beta));
        b
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["beta_x1".into(), "beta_z1".into(), "beta_z2".into()];
        for k in 0..self.binary_covariates.len() {
            names.push(format!("beta_z{}", 3 + k));
        }
        names
    }

    pub fn error_model(&self) -> OutcomeErrorModel {
        OutcomeErrorModel::new(self.se, self.sp, self.eta).expect("validated scenario")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| SimError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }

    /// SHA-256 of the canonical serialized form, recorded in run manifests.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Latent per-subject truth retained alongside a generated cohort.
#[derive(Debug, Clone)]
pub struct LatentTruth {
    /// True exposure X1.
    pub x_true: Vec<f64>,
    /// True event time; 0 for subjects contaminated at baseline.
    pub t_true: Vec<f64>,
    /// Baseline false negatives erroneously included in the cohort.
    pub contaminated: Vec<bool>,
    /// Post-missingness visit schedule, before any outcome-based truncation.
    pub visits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimulatedCohort {
    pub observed: Cohort,
    pub truth: LatentTruth,
}

impl SimulatedCohort {
    /// Fraction of subjects whose true event time exceeds the last grid time.
    pub fn true_censoring_rate(&self) -> f64 {
        let last = *self.observed.grid().taus().last().unwrap();
        let n = self.truth.t_true.len();
        let censored = self.truth.t_true.iter().filter(|&&t| t > last).count();
        censored as f64 / n as f64
    }

    /// Error-free cohort for the reference fit: true exposure, true interval
    /// indicators, truncated at the first true positive, contaminated
    /// subjects excluded.
    pub fn truth_cohort(&self) -> Cohort {
        let mut subjects = Vec::new();
        for (i, s) in self.observed.subjects().iter().enumerate() {
            if self.truth.contaminated[i] {
                continue;
            }
            let t_event = self.truth.t_true[i];
            let mut y = Vec::new();
            let mut t = Vec::new();
            for &tau in &self.truth.visits[i] {
                let positive = t_event <= tau;
                y.push(u8::from(positive));
                t.push(tau);
                if positive {
                    break;
                }
            }
            let mut x_star = vec![self.truth.x_true[i]];
            x_star.extend_from_slice(&s.x_star[1..]);
            subjects.push(SubjectRecord {
                id: s.id.clone(),
                y,
                t,
                x_star,
                z: s.z.clone(),
                stratum: s.stratum.clone(),
                in_calibration_subset: false,
                x_double_star: None,
            });
        }
        Cohort::from_parts(
            self.observed.grid().clone(),
            subjects,
            FollowUpMode::StopAfterFirstPositive,
        )
    }
}

fn sample_error(dist: &ErrorDist, rng: &mut ChaCha12Rng) -> f64 {
    match dist {
        ErrorDist::Normal { sigma2 } => Normal::new(0.0, sigma2.sqrt()).unwrap().sample(rng),
        ErrorDist::StudentT { df } => StudentT::new(*df).unwrap().sample(rng),
        ErrorDist::NormalMixture {
            weight1,
            mean1,
            var1,
            mean2,
            var2,
        } => {
            if rng.random::<f64>() < *weight1 {
                Normal::new(*mean1, var1.sqrt()).unwrap().sample(rng)
            } else {
                Normal::new(*mean2, var2.sqrt()).unwrap().sample(rng)
            }
        }
    }
}

/// Generates one replication. The RNG stream is keyed by (seed, rep), so any
/// replication can be regenerated independently and the result is
/// bit-identical across runs and thread counts.
pub fn generate_cohort(cfg: &ScenarioConfig, rep: u64) -> SimulatedCohort {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(rep.wrapping_add(1));

    let k_strata = cfg.n_strata();
    let grid = TimeGrid::new(cfg.visit_times.clone()).expect("validated scenario");
    let cov = DMatrix::from_fn(3, 3, |r, c| cfg.covariate_covariance[r][c]);
    let chol = cov
        .cholesky()
        .expect("covariate covariance must be positive definite")
        .l();
    let full_beta = cfg.full_beta_true();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let eps = Normal::new(0.0, cfg.epsilon_var.sqrt()).unwrap();

    // Calibration subset: simple random sample of the intended cohort.
    let mut in_subset = vec![false; cfg.n];
    for idx in rand::seq::index::sample(&mut rng, cfg.n, cfg.n_c) {
        in_subset[idx] = true;
    }

    let mut subjects = Vec::with_capacity(cfg.n);
    let mut x_true = Vec::with_capacity(cfg.n);
    let mut t_true = Vec::with_capacity(cfg.n);
    let mut contaminated = Vec::with_capacity(cfg.n);
    let mut visits = Vec::with_capacity(cfg.n);

    for i in 0..cfg.n {
        let stratum = if k_strata > 1 {
            rng.random_range(0..k_strata)
        } else {
            0
        };
        // (X1, Z1, Z2) multivariate normal.
        let g = nalgebra::DVector::from_iterator(3, (0..3).map(|_| std_normal.sample(&mut rng)));
        let xz = &chol * g;
        let (x1, z1, z2) = (xz[0], xz[1], xz[2]);
        let binaries: Vec<f64> = cfg
            .binary_covariates
            .iter()
            .map(|b| f64::from(u8::from(rng.random::<f64>() < b.prob)))
            .collect();

        let e = sample_error(&cfg.error_dist, &mut rng);
        let mut x_star = cfg.alpha[0] + cfg.alpha[1] * x1 + cfg.alpha[2] * z1 + cfg.alpha[3] * z2 + e;
        for (b, &zb) in cfg.binary_covariates.iter().zip(&binaries) {
            x_star += b.alpha * zb;
        }

        // Baseline false negative with probability 1 - eta: event before study start.
        let is_contaminated = cfg.eta < 1.0 && rng.random::<f64>() < 1.0 - cfg.eta;
        let t_event = if is_contaminated {
            0.0
        } else {
            let mut lp = full_beta[0] * x1 + full_beta[1] * z1 + full_beta[2] * z2;
            for (bk, &zb) in full_beta[3..].iter().zip(&binaries) {
                lp += bk * zb;
            }
            let rate = cfg.baseline_hazards[stratum] * lp.exp();
            Exp::new(rate).unwrap().sample(&mut rng)
        };

        // Missing-completely-at-random visit deletion.
        let kept: Vec<f64> = if cfg.p_miss > 0.0 {
            let miss = Bernoulli::new(cfg.p_miss).unwrap();
            grid.taus()
                .iter()
                .copied()
                .filter(|_| !miss.sample(&mut rng))
                .collect()
        } else {
            grid.taus().to_vec()
        };

        // Error-prone outcomes; truncate at the first positive in stop mode.
        let mut y = Vec::with_capacity(kept.len());
        let mut t = Vec::with_capacity(kept.len());
        for &tau in &kept {
            let truly_positive = t_event <= tau;
            let p_positive = if truly_positive { cfg.se } else { 1.0 - cfg.sp };
            let obs = u8::from(rng.random::<f64>() < p_positive);
            y.push(obs);
            t.push(tau);
            if cfg.stop_after_first_positive && obs == 1 {
                break;
            }
        }

        if y.is_empty() {
            // Every visit was missed; the subject carries no outcome data.
            continue;
        }

        let mut z = vec![z1, z2];
        z.extend_from_slice(&binaries);
        let x_double_star = if in_subset[i] {
            Some(vec![x1 + eps.sample(&mut rng)])
        } else {
            None
        };
        subjects.push(SubjectRecord {
            id: format!("{}", i + 1),
            y,
            t,
            x_star: vec![x_star],
            z,
            stratum: format!("s{stratum:02}"),
            in_calibration_subset: in_subset[i],
            x_double_star,
        });
        x_true.push(x1);
        t_true.push(t_event);
        contaminated.push(is_contaminated);
        visits.push(kept);
    }

    let mode = if cfg.stop_after_first_positive {
        FollowUpMode::StopAfterFirstPositive
    } else {
        FollowUpMode::FullSchedule
    };
    SimulatedCohort {
        observed: Cohort::from_parts(grid, subjects, mode),
        truth: LatentTruth {
            x_true,
            t_true,
            contaminated,
            visits,
        },
    }
}

/// Estimators the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    True,
    Naive,
    CovariateOnly,
    OutcomeOnly,
    Proposed,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::True,
        Estimator::Naive,
        Estimator::CovariateOnly,
        Estimator::OutcomeOnly,
        Estimator::Proposed,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Estimator::True => "true",
            Estimator::Naive => "naive",
            Estimator::CovariateOnly => "covariate_only",
            Estimator::OutcomeOnly => "outcome_only",
            Estimator::Proposed => "proposed",
        }
    }

    pub fn parse(text: &str) -> Option<Estimator> {
        match text.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "true" => Some(Estimator::True),
            "naive" => Some(Estimator::Naive),
            "covariate_only" => Some(Estimator::CovariateOnly),
            "outcome_only" => Some(Estimator::OutcomeOnly),
            "proposed" => Some(Estimator::Proposed),
            _ => None,
        }
    }

    fn needs_calibration(&self) -> bool {
        matches!(self, Estimator::CovariateOnly | Estimator::Proposed)
    }

    fn needs_outcome_fit(&self) -> bool {
        matches!(self, Estimator::OutcomeOnly | Estimator::Proposed)
    }
}

type EstimateResult = Result<(Vec<f64>, Vec<f64>), String>;

/// One replication's per-estimator outcomes plus the fitted attenuation
/// coefficient when a calibration was run.
#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub estimates: Vec<(Estimator, EstimateResult)>,
    pub delta1_hat: Option<f64>,
}

fn run_replication(
    cfg: &ScenarioConfig,
    rep: u64,
    estimators: &[Estimator],
    fit_options: &FitOptions,
) -> ReplicationOutcome {
    let sim = generate_cohort(cfg, rep);
    let cohort = &sim.observed;
    let stratified = cfg.n_strata() > 1;
    let err = cfg.error_model();

    let needs_calib = estimators.iter().any(|e| e.needs_calibration());
    let calib = if needs_calib {
        Some(crate::calibration::fit_calibration(cohort))
    } else {
        None
    };
    let delta1_hat = calib.as_ref().and_then(|c| match c {
        Ok(m) => Some(m.delta1[0][0]),
        Err(_) => None,
    });

    let outcome_fit = if estimators.iter().any(|e| e.needs_outcome_fit()) {
        Some(pipeline::outcome_only_method_fit(
            cohort,
            &err,
            stratified,
            fit_options,
        ))
    } else {
        None
    };

    let to_result = |r: Result<pipeline::MethodFit, PipelineError>| -> EstimateResult {
        r.map(|f| (f.beta.clone(), f.standard_errors()))
            .map_err(|e| e.to_string())
    };

    let mut estimates = Vec::with_capacity(estimators.len());
    for &est in estimators {
        let res: EstimateResult = match est {
            Estimator::True => {
                let truth = sim.truth_cohort();
                to_result(pipeline::naive_method_fit(&truth, stratified))
            }
            Estimator::Naive => to_result(pipeline::naive_method_fit(cohort, stratified)),
            Estimator::CovariateOnly => match calib.as_ref().unwrap() {
                Ok(c) => to_result(pipeline::covariate_only_method_fit(cohort, c, stratified)),
                Err(e) => Err(e.to_string()),
            },
            Estimator::OutcomeOnly => match outcome_fit.as_ref().unwrap() {
                Ok(f) => Ok((f.beta.clone(), f.standard_errors())),
                Err(e) => Err(e.to_string()),
            },
            Estimator::Proposed => match (outcome_fit.as_ref().unwrap(), calib.as_ref().unwrap()) {
                (Ok(f), Ok(c)) => to_result(pipeline::apply_correction(
                    pipeline::Method::Proposed,
                    &f.beta,
                    &f.beta_covariance,
                    c,
                    None,
                    Some(f),
                )),
                (Err(e), _) => Err(e.to_string()),
                (_, Err(e)) => Err(e.to_string()),
            },
        };
        estimates.push((est, res));
    }
    ReplicationOutcome {
        estimates,
        delta1_hat,
    }
}

const Z_975: f64 = 1.959963984540054;

/// Per-parameter summary across replications.
#[derive(Debug, Clone, Serialize)]
pub struct ParamMetrics {
    pub name: String,
    pub true_value: f64,
    pub mean_estimate: f64,
    /// Mean of (estimate - truth) / truth * 100; absent when truth is 0.
    pub pct_bias: Option<f64>,
    /// Mean of the model-based standard errors.
    pub ase: f64,
    /// Empirical standard deviation of the estimates; absent for R < 2.
    pub ese: Option<f64>,
    /// Fraction of 95% Wald intervals covering the truth.
    pub coverage: f64,
    /// Wald rejection rate of H0: beta = 0; present only when truth is 0.
    pub type1_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsTable {
    pub estimator: String,
    pub n_replications: usize,
    pub n_used: usize,
    pub n_failed: usize,
    pub params: Vec<ParamMetrics>,
}

impl MetricsTable {
    /// Delimited table in the paper's column layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,true_value,mean_estimate,pct_bias,ase,ese,cp95,type1_error,n_used,n_failed\n");
        for p in &self.params {
            let fmt_opt = |v: &Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{:.6},{},{:.6},{},{},{}\n",
                p.name,
                p.true_value,
                p.mean_estimate,
                fmt_opt(&p.pct_bias),
                p.ase,
                fmt_opt(&p.ese),
                p.coverage,
                fmt_opt(&p.type1_error),
                self.n_used,
                self.n_failed,
            ));
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&ParamMetrics> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub n_replications: usize,
    pub tables: Vec<MetricsTable>,
    /// Mean fitted attenuation coefficient across replications where a
    /// calibration was run.
    pub mean_delta1: Option<f64>,
}

impl ScenarioResult {
    pub fn table(&self, est: Estimator) -> Option<&MetricsTable> {
        self.tables.iter().find(|t| t.estimator == est.label())
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub fit_options: FitOptions,
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            fit_options: FitOptions::default(),
            parallel: true,
        }
    }
}

/// Runs the scenario for the requested estimators. Replications execute
/// concurrently; results are reduced in replication order, so output is
/// independent of thread count.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    estimators: &[Estimator],
    opts: &RunOptions,
) -> Result<ScenarioResult, SimError> {
    cfg.validate()?;
    if cfg.replications == 0 {
        return Err(SimError::InvalidScenario(
            "replications must be positive".into(),
        ));
    }
    let reps: Vec<u64> = (0..cfg.replications as u64).collect();
    let run = |&rep: &u64| run_replication(cfg, rep, estimators, &opts.fit_options);
    let outcomes: Vec<ReplicationOutcome> = if opts.parallel {
        reps.par_iter().map(run).collect()
    } else {
        reps.iter().map(run).collect()
    };

    let truth = cfg.full_beta_true();
    let names = cfg.parameter_names();
    let mut tables = Vec::new();
    for (e_idx, &est) in estimators.iter().enumerate() {
        let successes: Vec<&(Vec<f64>, Vec<f64>)> = outcomes
            .iter()
            .filter_map(|o| o.estimates[e_idx].1.as_ref().ok())
            .collect();
        let n_used = successes.len();
        let n_failed = cfg.replications - n_used;
        let mut params = Vec::new();
        for (j, name) in names.iter().enumerate() {
            let b0 = truth[j];
            let ests: Vec<f64> = successes.iter().map(|(b, _)| b[j]).collect();
            let ses: Vec<f64> = successes.iter().map(|(_, s)| s[j]).collect();
            let mean_est = mean(&ests);
            let pct_bias = if b0 != 0.0 {
                Some(mean(&ests.iter().map(|b| (b - b0) / b0 * 100.0).collect::<Vec<_>>()))
            } else {
                None
            };
            let ase = mean(&ses);
            let ese = if ests.len() >= 2 { Some(sd(&ests)) } else { None };
            let coverage = if n_used > 0 {
                ests.iter()
                    .zip(&ses)
                    .filter(|(b, s)| (*b - b0).abs() <= Z_975 * **s)
                    .count() as f64
                    / n_used as f64
            } else {
                f64::NAN
            };
            let type1_error = if b0 == 0.0 && n_used > 0 {
                Some(
                    ests.iter()
                        .zip(&ses)
                        .filter(|(b, s)| b.abs() > Z_975 * **s)
                        .count() as f64
                        / n_used as f64,
                )
            } else {
                None
            };
            params.push(ParamMetrics {
                name: name.clone(),
                true_value: b0,
                mean_estimate: mean_est,
                pct_bias,
                ase,
                ese,
                coverage,
                type1_error,
            });
        }
        tables.push(MetricsTable {
            estimator: est.label().to_string(),
            n_replications: cfg.replications,
            n_used,
            n_failed,
            params,
        });
    }

    let deltas: Vec<f64> = outcomes.iter().filter_map(|o| o.delta1_hat).collect();
    Ok(ScenarioResult {
        scenario: cfg.name.clone(),
        seed: cfg.rng_seed,
        config_hash: cfg.config_hash(),
        n_replications: cfg.replications,
        tables,
        mean_delta1: if deltas.is_empty() {
            None
        } else {
            Some(mean(&deltas))
        },
    })
}

/// Wald type-I-error rate of the proposed method; requires `beta_x1 = 0`.
pub fn type_one_error(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<f64, SimError> {
    if cfg.beta_true[0] != 0.0 {
        return Err(SimError::InvalidScenario(
            "type I error requires beta_x1 = 0".into(),
        ));
    }
    let result = run_scenario(cfg, &[Estimator::Proposed], opts)?;
    let table = result.table(Estimator::Proposed).unwrap();
    table
        .param("beta_x1")
        .and_then(|p| p.type1_error)
        .ok_or_else(|| SimError::InvalidScenario("no successful replications".into()))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
