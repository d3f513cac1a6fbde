//! Command-line interface: fit survival models on long-format data, fit and
//! export calibration equations, and run simulation scenarios.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use survcalib::calibration::{fit_calibration, CalibrationError, CalibrationModel};
use survcalib::data::{
    ingest_long, validate_cohort, Cohort, FollowUpMode, IngestOptions, OutcomeErrorModel,
};
use survcalib::io::{
    self, read_calibration, read_long_csv, write_calibration, CalibrationFile, ColumnSpec,
};
use survcalib::mle::FitOptions;
use survcalib::pipeline::{self, MethodFit, PipelineError};
use survcalib::sim::{self, presets, Estimator, RunOptions, ScenarioConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;
const EXIT_SINGULARITY: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(
    name = "survcalib",
    about = "Discrete-time proportional hazards with misclassified outcomes and regression-calibrated covariates",
    version
)]
struct Cli {
    /// Cap worker threads used for replications and large likelihood sums.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an outcome model on a long-format CSV file.
    Fit(FitArgs),
    /// Fit the calibration regression and export its coefficients.
    Calibrate(CalibrateArgs),
    /// Run a simulation scenario and write metrics tables.
    Simulate(SimulateArgs),
    /// Generate one replication of a scenario as a long-format CSV.
    Generate(GenerateArgs),
    /// List the built-in scenario presets.
    Presets,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    /// Complementary log-log GLM treating outcomes and covariates as exact.
    Naive,
    /// Likelihood fit correcting outcome misclassification only.
    OutcomeOnly,
    /// Naive GLM with the regression-calibration coefficient correction.
    CovariateOnly,
    /// Outcome-error fit plus the calibration correction (the full pipeline).
    Proposed,
    /// Alias of `naive` for data whose outcome columns hold the true values.
    True,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Full,
    Stop,
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV input.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Error-prone covariate columns (comma separated). Default: columns
    /// matching x_<k>_star.
    #[arg(long, value_delimiter = ',')]
    x_star: Vec<String>,
    /// Precise covariate columns (comma separated). Default: columns
    /// matching z_<k>.
    #[arg(long, value_delimiter = ',')]
    z: Vec<String>,
    /// Stratum column; enables strata-specific baseline survival.
    #[arg(long)]
    stratum: Option<String>,
    /// Outcome test sensitivity.
    #[arg(long)]
    se: Option<f64>,
    /// Outcome test specificity.
    #[arg(long)]
    sp: Option<f64>,
    /// Baseline negative predictive value (1 = trusted baseline).
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Follow-up mode override; default detects from the data.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Pre-fitted calibration coefficients file (from `calibrate`).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Exposure increment for reported hazard ratios.
    #[arg(long, default_value_t = 1.0)]
    increment: f64,
    /// Snap visit times within this tolerance onto a common grid.
    #[arg(long)]
    snap_to_grid: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    tol_g: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 10)]
    history: usize,
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write coefficients at full precision as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',')]
    x_star: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    z: Vec<String>,
    /// Output coefficients file (TOML).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in preset name (see `presets`).
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario configuration file (TOML).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override the scenario's replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Override the main-study size.
    #[arg(long)]
    n: Option<usize>,
    /// Override the calibration-subset size.
    #[arg(long)]
    n_c: Option<usize>,
    /// Override the RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimators to run: comma-separated subset of
    /// true,naive,covariate_only,outcome_only,proposed, or `all`.
    #[arg(long, default_value = "proposed,naive")]
    estimators: String,
    /// Output directory for metrics tables and the run manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Replication index to generate.
    #[arg(long, default_value_t = 0)]
    rep: u64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the latent truth (true exposure/event time) here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

struct CliFailure {
    code: u8,
    message: String,
}

impl CliFailure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<io::IoError> for CliFailure {
    fn from(e: io::IoError) -> Self {
        let code = match &e {
            io::IoError::Io(_) | io::IoError::Csv(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        CliFailure::new(code, e.to_string())
    }
}

impl From<PipelineError> for CliFailure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::NotConverged(_) => EXIT_CONVERGENCE,
            PipelineError::NoCovariance(_) => EXIT_SINGULARITY,
            PipelineError::Calibration(CalibrationError::SingularDelta)
            | PipelineError::Calibration(CalibrationError::RankDeficientDesign) => {
                EXIT_SINGULARITY
            }
            PipelineError::Glm(survcalib::glm::GlmError::RankDeficient) => EXIT_SINGULARITY,
            PipelineError::Glm(survcalib::glm::GlmError::NoConvergence(_)) => EXIT_CONVERGENCE,
            PipelineError::Mle(survcalib::mle::MleError::SingularHessian) => EXIT_SINGULARITY,
            _ => EXIT_VALIDATION,
        };
        CliFailure::new(code, e.to_string())
    }
}

impl From<CalibrationError> for CliFailure {
    fn from(e: CalibrationError) -> Self {
        let code = match &e {
            CalibrationError::SingularDelta | CalibrationError::RankDeficientDesign => {
                EXIT_SINGULARITY
            }
            _ => EXIT_VALIDATION,
        };
        CliFailure::new(code, e.to_string())
    }
}

impl From<survcalib::data::DataError> for CliFailure {
    fn from(e: survcalib::data::DataError) -> Self {
        CliFailure::new(EXIT_VALIDATION, e.to_string())
    }
}

impl From<sim::SimError> for CliFailure {
    fn from(e: sim::SimError) -> Self {
        CliFailure::new(EXIT_VALIDATION, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Presets => {
            for name in presets::preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_cohort(
    input: &Path,
    x_star: &[String],
    z: &[String],
    stratum: Option<&String>,
    mode: Option<ModeArg>,
    snap: Option<f64>,
) -> Result<(Cohort, ColumnSpec), CliFailure> {
    let cols = io::resolve_column_spec(input, x_star, z, stratum.map(|s| s.as_str()))?;
    let rows = read_long_csv(input, &cols)?;
    let opts = IngestOptions {
        mode: mode.map(|m| match m {
            ModeArg::Full => FollowUpMode::FullSchedule,
            ModeArg::Stop => FollowUpMode::StopAfterFirstPositive,
        }),
        snap_tol: snap,
    };
    let (cohort, report) = ingest_long(&rows, &opts)?;
    for snap_event in &report.snapped {
        eprintln!(
            "note: snapped visit time {} -> {}",
            snap_event.from, snap_event.to
        );
    }
    let diags = validate_cohort(&cohort);
    if !diags.is_empty() {
        let mut msg = String::from("cohort failed validation:\n");
        for d in diags {
            let _ = writeln!(msg, "  - {d}");
        }
        return Err(CliFailure::new(EXIT_VALIDATION, msg));
    }
    Ok((cohort, cols))
}

fn error_model(args: &FitArgs) -> Result<OutcomeErrorModel, CliFailure> {
    let needs_rates = matches!(args.method, MethodArg::OutcomeOnly | MethodArg::Proposed);
    match (args.se, args.sp) {
        (Some(se), Some(sp)) => Ok(OutcomeErrorModel::new(se, sp, args.eta)?),
        _ if needs_rates => Err(CliFailure::new(
            EXIT_VALIDATION,
            "--se and --sp are required for outcome-only and proposed fits",
        )),
        _ => Ok(OutcomeErrorModel::perfect()),
    }
}

fn resolve_calibration(
    args: &FitArgs,
    cohort: &Cohort,
    cols: &ColumnSpec,
) -> Result<CalibrationModel, CliFailure> {
    if let Some(path) = &args.calibration {
        let file = read_calibration(path)?;
        if file.x_star_columns != cols.x_star || file.z_columns != cols.z {
            return Err(CliFailure::new(
                EXIT_VALIDATION,
                format!(
                    "calibration file was fitted on columns ({:?}; {:?}) but the outcome model uses ({:?}; {:?}); the models must be aligned",
                    file.x_star_columns, file.z_columns, cols.x_star, cols.z
                ),
            ));
        }
        return Ok(file.model);
    }
    if cohort.calibration_subset_size() == 0 {
        return Err(CliFailure::new(
            EXIT_VALIDATION,
            format!(
                "method requires a calibration source: no rows have subset_ind = 1 and reference column(s) {:?}, and no --calibration file was given",
                cols.x_double_star
            ),
        ));
    }
    Ok(fit_calibration(cohort)?)
}

fn cmd_fit(args: FitArgs) -> Result<(), CliFailure> {
    let (cohort, cols) = load_cohort(
        &args.input,
        &args.x_star,
        &args.z,
        args.stratum.as_ref(),
        args.mode,
        args.snap_to_grid,
    )?;
    let stratified = cohort.n_strata() > 1;
    let err = error_model(&args)?;
    let fit_opts = FitOptions {
        tol_g: args.tol_g,
        max_iter: args.max_iter,
        history: args.history,
        fd_step: args.fd_step,
        compute_covariance: true,
    };

    let fit: MethodFit = match args.method {
        MethodArg::Naive | MethodArg::True => pipeline::naive_method_fit(&cohort, stratified)?,
        MethodArg::OutcomeOnly => {
            pipeline::outcome_only_method_fit(&cohort, &err, stratified, &fit_opts)?
        }
        MethodArg::CovariateOnly => {
            let calib = resolve_calibration(&args, &cohort, &cols)?;
            pipeline::covariate_only_method_fit(&cohort, &calib, stratified)?
        }
        MethodArg::Proposed => {
            let calib = resolve_calibration(&args, &cohort, &cols)?;
            pipeline::proposed_method_fit(&cohort, &err, &calib, stratified, &fit_opts)?
        }
    };

    let report = render_fit_report(&args, &cohort, &cols, &err, &fit);
    match &args.out {
        Some(path) => std::fs::write(path, report)
            .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", path.display())))?,
        None => print!("{report}"),
    }
    if let Some(path) = &args.out_csv {
        let mut csv_text = String::from("covariate,beta,se\n");
        let ses = fit.standard_errors();
        for (k, name) in cols.x_star.iter().chain(cols.z.iter()).enumerate() {
            let _ = writeln!(csv_text, "{name},{:.17e},{:.17e}", fit.beta[k], ses[k]);
        }
        std::fs::write(path, csv_text)
            .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    }
    if !fit.converged {
        return Err(CliFailure::new(
            EXIT_CONVERGENCE,
            "fit did not converge; see report for details",
        ));
    }
    Ok(())
}

fn method_label(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Naive => "naive",
        MethodArg::OutcomeOnly => "outcome-only",
        MethodArg::CovariateOnly => "covariate-only",
        MethodArg::Proposed => "proposed",
        MethodArg::True => "true",
    }
}

const Z_975: f64 = 1.959963984540054;

fn render_fit_report(
    args: &FitArgs,
    cohort: &Cohort,
    cols: &ColumnSpec,
    err: &OutcomeErrorModel,
    fit: &MethodFit,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "survcalib fit report");
    let _ = writeln!(out, "====================");
    let _ = writeln!(out, "input: {}", args.input.display());
    let _ = writeln!(out, "method: {}", method_label(args.method));
    let _ = writeln!(out, "{}", cohort.summary());
    if matches!(args.method, MethodArg::OutcomeOnly | MethodArg::Proposed) {
        let _ = writeln!(
            out,
            "outcome error model: se = {}, sp = {}, eta = {}",
            err.se, err.sp, err.eta
        );
    }
    let _ = writeln!(out);
    let inc = args.increment;
    let _ = writeln!(out, "coefficients (hazard ratios per increment of {inc}):");
    let _ = writeln!(
        out,
        "  {:<16} {:>10} {:>10} {:>8} {:>8} {:>8}",
        "covariate", "beta", "se", "hr", "hr_lo", "hr_hi"
    );
    let names: Vec<&String> = cols.x_star.iter().chain(cols.z.iter()).collect();
    let ses = fit.standard_errors();
    for (k, name) in names.iter().enumerate() {
        let b = fit.beta[k];
        let s = ses[k];
        let _ = writeln!(
            out,
            "  {:<16} {:>10.5} {:>10.5} {:>8.4} {:>8.4} {:>8.4}",
            name,
            b,
            s,
            (b * inc).exp(),
            ((b - Z_975 * s) * inc).exp(),
            ((b + Z_975 * s) * inc).exp(),
        );
    }
    if let Some(curves) = &fit.survival {
        let _ = writeln!(out);
        for (k, curve) in curves.iter().enumerate() {
            let label = cohort
                .strata_labels()
                .get(k)
                .cloned()
                .unwrap_or_else(|| format!("{k}"));
            let values: Vec<String> = curve
                .values()
                .iter()
                .enumerate()
                .map(|(j, s)| format!("S_{} = {s:.5}", j + 1))
                .collect();
            let _ = writeln!(
                out,
                "baseline survival [stratum {label}]: {}",
                values.join(", ")
            );
        }
    }
    let _ = writeln!(out);
    if let Some(ll) = fit.loglik {
        let _ = writeln!(out, "log-likelihood: {ll:.6}");
    }
    let _ = writeln!(
        out,
        "converged: {} (iterations: {})",
        fit.converged, fit.iterations
    );
    for w in &fit.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliFailure> {
    let (cohort, cols) = load_cohort(&args.input, &args.x_star, &args.z, None, None, None)?;
    let model = fit_calibration(&cohort)?;
    let file = CalibrationFile {
        x_star_columns: cols.x_star.clone(),
        z_columns: cols.z.clone(),
        model,
    };
    write_calibration(&args.out, &file)?;
    println!(
        "calibration fitted on {} subjects; delta1[0][0] = {:.4}; written to {}",
        file.model.n_c,
        file.model.delta1[0][0],
        args.out.display()
    );
    Ok(())
}

fn load_scenario(
    preset: Option<&String>,
    scenario: Option<&PathBuf>,
) -> Result<ScenarioConfig, CliFailure> {
    match (preset, scenario) {
        (Some(name), None) => Ok(presets::preset(name)?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
            Ok(ScenarioConfig::from_toml_str(&text)?)
        }
        _ => Err(CliFailure::new(
            EXIT_VALIDATION,
            "exactly one of --preset or --scenario is required",
        )),
    }
}

fn parse_estimators(text: &str) -> Result<Vec<Estimator>, CliFailure> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(Estimator::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let est = Estimator::parse(part).ok_or_else(|| {
            CliFailure::new(
                EXIT_VALIDATION,
                format!(
                    "unknown estimator `{part}`; expected true, naive, covariate_only, outcome_only or proposed"
                ),
            )
        })?;
        if !out.contains(&est) {
            out.push(est);
        }
    }
    if out.is_empty() {
        return Err(CliFailure::new(EXIT_VALIDATION, "no estimators selected"));
    }
    Ok(out)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliFailure> {
    let mut cfg = load_scenario(args.preset.as_ref(), args.scenario.as_ref())?;
    if let Some(r) = args.replications {
        if r == 0 {
            return Err(CliFailure::new(
                EXIT_VALIDATION,
                "--replications must be positive",
            ));
        }
        cfg.replications = r;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(n_c) = args.n_c {
        cfg.n_c = n_c;
    }
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    let estimators = parse_estimators(&args.estimators)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", args.out.display())))?;

    let started = std::time::Instant::now();
    let result = sim::run_scenario(&cfg, &estimators, &RunOptions::default())?;
    let elapsed = started.elapsed();

    let mut manifest = String::new();
    let _ = writeln!(manifest, "scenario = {:?}", result.scenario);
    let _ = writeln!(manifest, "seed = {}", result.seed);
    let _ = writeln!(manifest, "config_hash = {:?}", result.config_hash);
    let _ = writeln!(manifest, "replications = {}", result.n_replications);
    let _ = writeln!(manifest, "elapsed_seconds = {:.3}", elapsed.as_secs_f64());
    let _ = writeln!(
        manifest,
        "package_version = {:?}",
        env!("CARGO_PKG_VERSION")
    );
    if let Some(d) = result.mean_delta1 {
        let _ = writeln!(manifest, "mean_delta1 = {d:.6}");
    }
    for table in &result.tables {
        let file = args
            .out
            .join(format!("{}__{}.csv", cfg.name, table.estimator));
        std::fs::write(&file, table.to_csv())
            .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", file.display())))?;
        let _ = writeln!(
            manifest,
            "[failures.{}]\nfailed = {}\nused = {}",
            table.estimator, table.n_failed, table.n_used
        );
        println!("wrote {}", file.display());
    }
    let scenario_file = args.out.join(format!("{}.scenario.toml", cfg.name));
    std::fs::write(&scenario_file, cfg.to_toml_string())
        .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", scenario_file.display())))?;
    let manifest_file = args.out.join(format!("{}.manifest.toml", cfg.name));
    std::fs::write(&manifest_file, manifest)
        .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", manifest_file.display())))?;
    println!("wrote {}", manifest_file.display());
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliFailure> {
    let mut cfg = load_scenario(args.preset.as_ref(), args.scenario.as_ref())?;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    let sim = sim::generate_cohort(&cfg, args.rep);
    let n_z = 2 + cfg.binary_covariates.len();
    let cols = ColumnSpec::new(
        vec!["x_1_star".into()],
        (1..=n_z).map(|k| format!("z_{k}")).collect(),
        if cfg.n_strata() > 1 {
            Some("stratum".into())
        } else {
            None
        },
    );
    io::write_long_csv(&args.out, &sim.observed, &cols)?;
    println!(
        "wrote {} ({} subjects, {} rows)",
        args.out.display(),
        sim.observed.n_subjects(),
        sim.observed
            .subjects()
            .iter()
            .map(|s| s.n_visits())
            .sum::<usize>()
    );
    if let Some(truth_path) = &args.truth {
        let mut text = String::from("ID,x_1_true,t_true,contaminated\n");
        for (i, s) in sim.observed.subjects().iter().enumerate() {
            let _ = writeln!(
                text,
                "{},{},{},{}",
                s.id,
                sim.truth.x_true[i],
                sim.truth.t_true[i],
                u8::from(sim.truth.contaminated[i])
            );
        }
        std::fs::write(truth_path, text)
            .map_err(|e| CliFailure::new(EXIT_IO, format!("{}: {e}", truth_path.display())))?;
        println!("wrote {}", truth_path.display());
    }
    Ok(())
}
