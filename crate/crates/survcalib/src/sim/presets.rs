//! Named scenario presets covering the simulation study's settings: the main
//! bias/coverage grids, the type-I-error grid, the stratified, baseline-NPV,
//! missed-visit and large-cohort self-report variants, plus the worked
//! long-format example dataset.
//!
//! Canonical names are listed by [`preset_names`]; `tableN_rowM` aliases
//! address rows of the corresponding grids in reading order. Hyphens and
//! underscores are interchangeable.

use super::{BinaryCovariate, ErrorDist, ScenarioConfig, SimError};

const SIGMA2_D60: f64 = 0.59;
const SIGMA2_D30: f64 = 1.72;
/// Mixture second-component variance 1.5^2; reproduces the reported
/// attenuation coefficient of about 0.21.
const MIX_VAR2: f64 = 2.25;

fn base(name: &str) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        n: 1000,
        n_c: 500,
        replications: 1000,
        rng_seed: 20171,
        visit_times: vec![2.0, 5.0, 7.0, 8.0],
        baseline_hazards: vec![0.012],
        beta_true: vec![1.5f64.ln(), 0.7f64.ln(), 1.3f64.ln()],
        covariate_covariance: vec![
            vec![1.0, 0.3, 0.3],
            vec![0.3, 1.0, 0.3],
            vec![0.3, 0.3, 1.0],
        ],
        alpha: vec![1.0, 0.8, 0.3, 0.5],
        error_dist: ErrorDist::Normal { sigma2: SIGMA2_D60 },
        epsilon_var: 0.06,
        se: 0.8,
        sp: 0.9,
        eta: 1.0,
        p_miss: 0.0,
        stop_after_first_positive: false,
        binary_covariates: vec![],
    }
}

/// Censoring-rate setting: visit grid and the baseline hazard per target CR.
#[derive(Clone, Copy)]
enum Censoring {
    High, // CR about 0.90
    Low,  // CR about 0.55
}

fn apply_censoring(cfg: &mut ScenarioConfig, cr: Censoring, log3_effect: bool, stratified: bool) {
    match cr {
        Censoring::High => {
            cfg.visit_times = vec![2.0, 5.0, 7.0, 8.0];
            cfg.baseline_hazards = if stratified {
                vec![0.008, 0.010, 0.011, 0.019]
            } else if log3_effect {
                vec![0.008]
            } else {
                vec![0.012]
            };
        }
        Censoring::Low => {
            cfg.visit_times = vec![1.0, 3.0, 4.0, 6.0];
            cfg.baseline_hazards = if stratified {
                vec![0.090, 0.080, 0.075, 0.131]
            } else if log3_effect {
                vec![0.076]
            } else {
                vec![0.094]
            };
        }
    }
}

fn grid_rows() -> Vec<((f64, f64), f64, Censoring, &'static str)> {
    let mut rows = Vec::new();
    for &(se, sp, sesp) in &[(0.8, 0.9, "se80-sp90"), (0.9, 0.8, "se90-sp80")] {
        for &(sigma2, dtag) in &[(SIGMA2_D60, "d60"), (SIGMA2_D30, "d30")] {
            for &(cr, crtag) in &[(Censoring::High, "cr90"), (Censoring::Low, "cr55")] {
                let _ = (sesp, dtag, crtag);
                rows.push(((se, sp), sigma2, cr, sesp));
            }
        }
    }
    rows
}

fn push(list: &mut Vec<ScenarioConfig>, cfg: ScenarioConfig) {
    debug_assert!(cfg.validate().is_ok(), "preset {} invalid", cfg.name);
    list.push(cfg);
}

fn build_all() -> Vec<ScenarioConfig> {
    let mut out = Vec::new();

    // Main bias/coverage grid, moderate effect size.
    for ((se, sp), sigma2, cr, sesp) in grid_rows() {
        let dtag = if sigma2 == SIGMA2_D60 { "d60" } else { "d30" };
        let crtag = if matches!(cr, Censoring::High) { "cr90" } else { "cr55" };
        let mut cfg = base(&format!("table1-{sesp}-{dtag}-{crtag}"));
        cfg.se = se;
        cfg.sp = sp;
        cfg.error_dist = ErrorDist::Normal { sigma2 };
        apply_censoring(&mut cfg, cr, false, false);
        push(&mut out, cfg);
    }

    // Same grid with a strong exposure effect (log 3).
    for ((se, sp), sigma2, cr, sesp) in grid_rows() {
        let dtag = if sigma2 == SIGMA2_D60 { "d60" } else { "d30" };
        let crtag = if matches!(cr, Censoring::High) { "cr90" } else { "cr55" };
        let mut cfg = base(&format!("table2-{sesp}-{dtag}-{crtag}"));
        cfg.se = se;
        cfg.sp = sp;
        cfg.beta_true[0] = 3.0f64.ln();
        cfg.error_dist = ErrorDist::Normal { sigma2 };
        apply_censoring(&mut cfg, cr, true, false);
        push(&mut out, cfg);
    }

    // Non-normal covariate error.
    for &(se, sp, sesp) in &[(0.8, 0.9, "se80-sp90"), (0.9, 0.8, "se90-sp80")] {
        for (dist, dtag) in [
            (ErrorDist::StudentT { df: 4.0 }, "t4"),
            (
                ErrorDist::NormalMixture {
                    weight1: 0.4,
                    mean1: 0.0,
                    var1: 1.0,
                    mean2: 2.0,
                    var2: MIX_VAR2,
                },
                "mix",
            ),
        ] {
            for &(cr, crtag) in &[(Censoring::High, "cr90"), (Censoring::Low, "cr55")] {
                let mut cfg = base(&format!("table3-{sesp}-{dtag}-{crtag}"));
                cfg.se = se;
                cfg.sp = sp;
                cfg.error_dist = dist.clone();
                apply_censoring(&mut cfg, cr, false, false);
                push(&mut out, cfg);
            }
        }
    }

    // Strata-specific baseline hazards (four equal strata).
    for ((se, sp), sigma2, cr, sesp) in grid_rows() {
        let dtag = if sigma2 == SIGMA2_D60 { "d60" } else { "d30" };
        let crtag = if matches!(cr, Censoring::High) { "cr90" } else { "cr55" };
        let mut cfg = base(&format!("table4-{sesp}-{dtag}-{crtag}"));
        cfg.se = se;
        cfg.sp = sp;
        cfg.error_dist = ErrorDist::Normal { sigma2 };
        apply_censoring(&mut cfg, cr, false, true);
        push(&mut out, cfg);
    }

    // Type I error: null exposure effect.
    for ((se, sp), sigma2, cr, sesp) in grid_rows() {
        let dtag = if sigma2 == SIGMA2_D60 { "d60" } else { "d30" };
        let crtag = if matches!(cr, Censoring::High) { "cr90" } else { "cr55" };
        let mut cfg = base(&format!("table5-{sesp}-{dtag}-{crtag}"));
        cfg.se = se;
        cfg.sp = sp;
        cfg.beta_true[0] = 0.0;
        cfg.error_dist = ErrorDist::Normal { sigma2 };
        apply_censoring(&mut cfg, cr, false, false);
        push(&mut out, cfg);
    }

    // Imperfect baseline negative predictive value, high censoring.
    for &(se, sp, sesp) in &[(0.8, 0.9, "se80-sp90"), (0.9, 0.8, "se90-sp80")] {
        for &(sigma2, dtag) in &[(SIGMA2_D60, "d60"), (SIGMA2_D30, "d30")] {
            for &(eta, etag) in &[(0.98, "eta98"), (0.90, "eta90")] {
                let mut cfg = base(&format!("tables2-{sesp}-{dtag}-{etag}"));
                cfg.se = se;
                cfg.sp = sp;
                cfg.eta = eta;
                cfg.error_dist = ErrorDist::Normal { sigma2 };
                push(&mut out, cfg);
            }
        }
    }

    // Missing visits, high censoring.
    for &(se, sp, sesp) in &[(0.8, 0.9, "se80-sp90"), (0.9, 0.8, "se90-sp80")] {
        for &(sigma2, dtag) in &[(SIGMA2_D60, "d60"), (SIGMA2_D30, "d30")] {
            for &(p_miss, mtag) in &[(0.10, "pmiss10"), (0.40, "pmiss40")] {
                let mut cfg = base(&format!("tables3-{sesp}-{dtag}-{mtag}"));
                cfg.se = se;
                cfg.sp = sp;
                cfg.p_miss = p_miss;
                cfg.error_dist = ErrorDist::Normal { sigma2 };
                push(&mut out, cfg);
            }
        }
    }

    // Large self-report cohort: annual visits, rare outcome, imperfect
    // baseline screen, follow-up stops at the first positive.
    for &(sigma2, dtag) in &[(SIGMA2_D60, "d60"), (SIGMA2_D30, "d30")] {
        let mut cfg = base(&format!("tables4-whi-{dtag}"));
        cfg.n = 65000;
        cfg.n_c = 500;
        cfg.se = 0.61;
        cfg.sp = 0.995;
        cfg.eta = 0.96;
        cfg.visit_times = (1..=8).map(|t| t as f64).collect();
        cfg.baseline_hazards = vec![0.0056];
        cfg.error_dist = ErrorDist::Normal { sigma2 };
        cfg.stop_after_first_positive = true;
        push(&mut out, cfg);
    }

    // Worked long-format example: one error-prone and four precise
    // covariates (two continuous, two binary), self-report follow-up.
    let mut s1 = base("s1-example");
    s1.n = 10000;
    s1.n_c = 500;
    s1.se = 0.60;
    s1.sp = 0.98;
    s1.eta = 0.95;
    s1.visit_times = vec![1.0, 2.0, 3.0, 4.0];
    s1.baseline_hazards = vec![0.026];
    s1.stop_after_first_positive = true;
    s1.binary_covariates = vec![
        BinaryCovariate {
            prob: 0.5,
            alpha: 0.2,
            beta: 1.2f64.ln(),
        },
        BinaryCovariate {
            prob: 0.5,
            alpha: -0.2,
            beta: 0.8f64.ln(),
        },
    ];
    push(&mut out, s1);

    out
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('_', "-")
}

/// Resolves a preset by canonical name or `tableN-rowM` alias.
pub fn preset(name: &str) -> Result<ScenarioConfig, SimError> {
    let wanted = normalize(name);
    let all = build_all();
    if let Some(cfg) = all.iter().find(|c| normalize(&c.name) == wanted) {
        return Ok(cfg.clone());
    }
    // Row aliases: tableN-rowM indexes the N-th grid in construction order.
    for (prefix, tag) in [
        ("table1-row", "table1-"),
        ("table2-row", "table2-"),
        ("table3-row", "table3-"),
        ("table4-row", "table4-"),
        ("table5-row", "table5-"),
        ("tables2-row", "tables2-"),
        ("tables3-row", "tables3-"),
        ("tables4-row", "tables4-whi-"),
    ] {
        if let Some(idx) = wanted.strip_prefix(prefix) {
            if let Ok(row) = idx.parse::<usize>() {
                let rows: Vec<&ScenarioConfig> = all
                    .iter()
                    .filter(|c| normalize(&c.name).starts_with(tag))
                    .collect();
                if row >= 1 && row <= rows.len() {
                    return Ok(rows[row - 1].clone());
                }
            }
        }
    }
    Err(SimError::UnknownPreset(
        name.to_string(),
        preset_names().join(", "),
    ))
}

pub fn preset_names() -> Vec<String> {
    build_all().into_iter().map(|c| c.name).collect()
}
