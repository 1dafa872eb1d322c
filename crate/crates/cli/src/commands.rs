use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use pstrat::data::{load_dataset, write_dataset, Dataset, LoadOptions};
use pstrat::em::{fit_em, FitOptions, FitResult};
use pstrat::estimands::{bootstrap_catt, BootstrapOptions, BootstrapResult, EstimandReport};
use pstrat::glm::LogisticOptions;
use pstrat::model::{ModelSpec, ParamId, SensitivityConfig, XiMode};
use pstrat::propensity::{balance as balance_report, fit_propensity, trim, PropensityFit};
use pstrat::sensitivity::{
    reduction_table, run_grid, write_json_report, write_parameter_table, write_reduction_table,
    GridOptions, DEFAULT_GRID,
};
use pstrat::simulate::{generate, write_truth, GeneratorSpec};
use serde::Serialize;

use crate::config::{read_structured, RunConfig};
use crate::error::CliError;

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator: Option<&'a GeneratorSpec>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| io_err(&path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&dir.join(name), e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(&dir.join(name), e))?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn write_csv(dir: &Path, name: &str, rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).map_err(|e| io_err(&dir.join(name), e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(&dir.join(name), e))?;
    write_text(dir, name, &String::from_utf8_lossy(&bytes))
}

fn prepare_out(config: &RunConfig, command: &str, generator: Option<&GeneratorSpec>) -> Result<(), CliError> {
    fs::create_dir_all(&config.out).map_err(|e| io_err(&config.out, e))?;
    write_json(
        &config.out,
        "config.json",
        &Resolved {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            generator,
        },
    )
}

fn load(config: &RunConfig) -> Result<Dataset, CliError> {
    let path = config
        .input
        .as_ref()
        .ok_or_else(|| CliError::Validation("no input file (--input)".into()))?;
    if !config.data.delimiter.is_ascii() {
        return Err(CliError::Validation(format!(
            "delimiter `{}` is not a single ASCII character",
            config.data.delimiter
        )));
    }
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let options = LoadOptions {
        delimiter: config.data.delimiter as u8,
        span_label: config.data.span_label.clone(),
    };
    let data = load_dataset(file, &options)
        .map_err(CliError::from)
        .map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })?;
    let report = data.validate();
    let fatal: Vec<String> = report
        .violations
        .iter()
        .filter(|v| v.is_fatal())
        .map(|v| v.to_string())
        .collect();
    if !fatal.is_empty() {
        return Err(CliError::Validation(format!("{}: {}", path.display(), fatal.join("; "))));
    }
    for v in report.violations.iter().filter(|v| !v.is_fatal()) {
        eprintln!("pstrat: warning: {v}");
    }
    Ok(data)
}

fn logistic_options(config: &RunConfig) -> LogisticOptions {
    LogisticOptions {
        ridge: config.propensity.ridge,
        ..LogisticOptions::default()
    }
}

#[derive(Serialize)]
struct TrimSummary {
    threshold: f64,
    kept: usize,
    dropped: usize,
}

/// Fits the propensity score and applies the optional trim. After trimming
/// the score model is refitted on the kept units, as the bootstrap does.
fn prepare(
    config: &RunConfig,
    data: Dataset,
) -> Result<(Dataset, PropensityFit, Option<TrimSummary>), CliError> {
    let opts = logistic_options(config);
    let ps = fit_propensity(&data, &opts)?;
    match config.propensity.trim {
        None => Ok((data, ps, None)),
        Some(t) => {
            let (kept, _) = trim(&data, &ps.scores, t)?;
            let summary = TrimSummary {
                threshold: t,
                kept: kept.len(),
                dropped: data.len() - kept.len(),
            };
            kept.ensure_estimable()?;
            let ps = fit_propensity(&kept, &opts)?;
            Ok((kept, ps, Some(summary)))
        }
    }
}

fn xi_mode(config: &RunConfig) -> Result<XiMode, CliError> {
    config
        .model
        .xi
        .parse()
        .map_err(|e| CliError::Validation(format!("xi: {e}")))
}

fn fit_options(config: &RunConfig) -> FitOptions {
    FitOptions {
        tol: config.em.tol,
        max_iter: config.em.max_iter,
        n_restarts: config.em.restarts,
        seed: config.seed.unwrap_or(0),
        ..FitOptions::default()
    }
}

fn bootstrap_options(config: &RunConfig) -> Option<BootstrapOptions> {
    (config.bootstrap.b > 0).then(|| BootstrapOptions {
        b: config.bootstrap.b,
        seed: config.seed.unwrap_or(0),
        propensity: logistic_options(config),
        fit: FitOptions {
            n_restarts: 1,
            compute_se: false,
            ..fit_options(config)
        },
        ..BootstrapOptions::default()
    })
}

fn check_em(config: &RunConfig) -> Result<(), CliError> {
    if !(config.em.tol > 0.0) {
        return Err(CliError::Validation(format!("tol must be positive, got {}", config.em.tol)));
    }
    if config.em.restarts == 0 {
        return Err(CliError::Validation("restarts must be at least 1".into()));
    }
    if config.bootstrap.b == 1 {
        return Err(CliError::Validation("bootstrap needs at least 2 replicates".into()));
    }
    Ok(())
}

pub fn balance(config: RunConfig) -> Result<(), CliError> {
    if config.propensity.bins == 0 {
        return Err(CliError::Validation("bins must be at least 1".into()));
    }
    prepare_out(&config, "balance", None)?;
    let data = load(&config)?;
    let ps = fit_propensity(&data, &logistic_options(&config))?;
    let report = balance_report(&data, &ps.scores, config.propensity.bins)?;

    let mut rows = vec![vec!["covariate".to_string(), "asd".into(), "degenerate".into()]];
    for a in &report.asd {
        rows.push(vec![a.covariate.clone(), a.asd.to_string(), a.degenerate.to_string()]);
    }
    write_csv(&config.out, "balance.csv", &rows)?;

    let mut rows = vec![vec![
        "arm".to_string(),
        "bin_low".into(),
        "bin_high".into(),
        "count".into(),
    ]];
    for (arm, hist) in [("treated", &report.treated), ("untreated", &report.untreated)] {
        for (b, w) in hist.edges.windows(2).enumerate() {
            rows.push(vec![
                arm.to_string(),
                w[0].to_string(),
                w[1].to_string(),
                hist.counts[b].to_string(),
            ]);
        }
    }
    write_csv(&config.out, "overlap.csv", &rows)?;

    #[derive(Serialize)]
    struct Report<'a> {
        n: usize,
        n_treated: usize,
        propensity: PropensitySummary<'a>,
        balance: &'a pstrat::propensity::BalanceReport,
    }
    write_json(
        &config.out,
        "report.json",
        &Report {
            n: data.len(),
            n_treated: data.n_treated(),
            propensity: PropensitySummary::of(&ps),
            balance: &report,
        },
    )
}

#[derive(Serialize)]
struct PropensitySummary<'a> {
    coefficients: &'a [f64],
    log_likelihood: f64,
    converged: bool,
    iterations: usize,
    ridge: f64,
}

impl<'a> PropensitySummary<'a> {
    fn of(fit: &'a PropensityFit) -> Self {
        PropensitySummary {
            coefficients: &fit.coefficients,
            log_likelihood: fit.log_likelihood,
            converged: fit.converged,
            iterations: fit.iterations,
            ridge: fit.ridge,
        }
    }
}

pub fn fit(mut config: RunConfig) -> Result<(), CliError> {
    check_em(&config)?;
    let eta_n = match config.model.eta_n.as_deref() {
        None => 0.0,
        Some([v]) => *v,
        Some(other) => {
            return Err(CliError::Validation(format!(
                "fit takes one eta_n value, got {}; use `sensitivity` for a grid",
                other.len()
            )))
        }
    };
    let spec = if config.model.base {
        let xi_zero = config.model.xi == "free" || xi_mode(&config)? == XiMode::Fixed(0.0);
        if !xi_zero || config.model.eta_c != 0.0 || eta_n != 0.0 {
            return Err(CliError::Validation(
                "--base fixes xi, eta_c and eta_n at 0; drop the other model flags".into(),
            ));
        }
        ModelSpec::Base
    } else {
        ModelSpec::Sensitivity(SensitivityConfig {
            xi_mode: xi_mode(&config)?,
            eta_c: config.model.eta_c,
            eta_n,
        })
    };
    config.model.eta_n = Some(vec![eta_n]);
    config.seed = Some(config.seed.unwrap_or(0));
    prepare_out(&config, "fit", None)?;

    let data = load(&config)?;
    data.ensure_estimable()?;
    let (data, ps, trim_summary) = prepare(&config, data)?;
    let fit = fit_em(&data, &ps.scores, &spec, &fit_options(&config))?;
    let mut estimands = EstimandReport::new(&fit, &data, &ps.scores)?;
    let boot = match bootstrap_options(&config) {
        Some(mut b) => {
            b.fit.warm_start = Some(fit.params);
            let r = bootstrap_catt(&data, &spec, &b)?;
            estimands = estimands.with_bootstrap(&r);
            Some(r)
        }
        None => None,
    };

    write_csv(&config.out, "params.csv", &param_rows(&fit))?;
    let mut rows = vec![EstimandReport::CSV_HEADER.iter().map(|s| s.to_string()).collect()];
    rows.push(estimands.csv_row());
    write_csv(&config.out, "estimands.csv", &rows)?;
    write_text(&config.out, "fit_report.txt", &fit.text_report())?;

    #[derive(Serialize)]
    struct Report<'a> {
        n: usize,
        n_treated: usize,
        spec: &'a ModelSpec,
        trim: Option<&'a TrimSummary>,
        propensity: PropensitySummary<'a>,
        params: &'a pstrat::ModelParams,
        se: Vec<(&'static str, f64)>,
        loglik: f64,
        iterations: usize,
        converged: bool,
        selected_start: usize,
        restarts: &'a [pstrat::em::RestartDiagnostic],
        estimands: &'a EstimandReport,
        bootstrap: Option<&'a BootstrapResult>,
    }
    write_json(
        &config.out,
        "report.json",
        &Report {
            n: data.len(),
            n_treated: data.n_treated(),
            spec: &spec,
            trim: trim_summary.as_ref(),
            propensity: PropensitySummary::of(&ps),
            params: &fit.params,
            se: fit.se.iter().map(|(p, s)| (p.name(), *s)).collect(),
            loglik: fit.loglik(),
            iterations: fit.iterations,
            converged: fit.converged,
            selected_start: fit.selected_start,
            restarts: &fit.restarts,
            estimands: &estimands,
            bootstrap: boot.as_ref(),
        },
    )?;
    if !fit.converged {
        return Err(CliError::Estimation(format!(
            "EM did not converge in {} iterations; restart diagnostics:\n{}",
            config.em.max_iter,
            fit.text_report()
        )));
    }
    Ok(())
}

fn param_rows(fit: &FitResult) -> Vec<Vec<String>> {
    let estimated = fit.spec.estimated();
    let mut rows = vec![vec![
        "parameter".to_string(),
        "estimate".into(),
        "se".into(),
        "status".into(),
    ]];
    for id in ParamId::ALL {
        rows.push(vec![
            id.name().to_string(),
            fit.params.get(id).to_string(),
            fit.se_of(id).map(|s| s.to_string()).unwrap_or_default(),
            if estimated.contains(&id) { "estimated" } else { "fixed" }.to_string(),
        ]);
    }
    rows
}

pub fn sensitivity(mut config: RunConfig) -> Result<(), CliError> {
    check_em(&config)?;
    if config.model.base {
        return Err(CliError::Validation("--base applies to `fit` only".into()));
    }
    let grid = config.model.eta_n.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec());
    let base = SensitivityConfig {
        xi_mode: xi_mode(&config)?,
        eta_c: config.model.eta_c,
        eta_n: 0.0,
    };
    config.model.eta_n = Some(grid.clone());
    config.seed = Some(config.seed.unwrap_or(0));
    prepare_out(&config, "sensitivity", None)?;

    let data = load(&config)?;
    data.ensure_estimable()?;
    let (data, _, _) = prepare(&config, data)?;
    let options = GridOptions {
        fit: fit_options(&config),
        propensity: logistic_options(&config),
        bootstrap: bootstrap_options(&config),
    };
    let table = run_grid(&data, &grid, base, &options)?;
    for r in &table.rows {
        if let Some(e) = &r.error {
            eprintln!("pstrat: warning: eta_n = {}: {e}", r.eta_n);
        }
    }
    let reduction = reduction_table(&table, &data)?;

    let mut w = create(&config.out, "sensitivity_params.csv")?;
    write_parameter_table(&table, &mut w)?;
    let mut w = create(&config.out, "reduction.csv")?;
    write_reduction_table(&reduction, &mut w)?;
    let mut w = create(&config.out, "sensitivity.json")?;
    write_json_report(&table, &mut w)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&config.out.join("sensitivity.json"), e))
}

pub fn simulate(mut config: RunConfig) -> Result<(), CliError> {
    let path = config
        .simulate
        .spec
        .clone()
        .ok_or_else(|| CliError::Validation("no generator spec (--spec)".into()))?;
    let mut spec: GeneratorSpec = read_structured(&path)?;
    if let Some(s) = config.seed {
        spec.seed = s;
    }
    config.seed = Some(spec.seed);
    spec.validate()?;
    prepare_out(&config, "simulate", Some(&spec))?;

    let (data, truth) = generate(&spec)?;
    let mut w = create(&config.out, "data.csv")?;
    write_dataset(&data, &mut w)?;
    let mut w = create(&config.out, "truth.csv")?;
    write_truth(&truth, &mut w)?;
    eprintln!(
        "pstrat: {} units, {} treated, {} untreated",
        data.len(),
        data.n_treated(),
        data.len() - data.n_treated()
    );
    Ok(())
}
