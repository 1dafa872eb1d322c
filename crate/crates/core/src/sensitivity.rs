//! Sweeps the never-user confounding parameter `eta_n` over a grid and
//! assembles per-parameter and percentage-reduction tables.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::em::{fit_em, opg_se, FitOptions, FitResult};
use crate::estimands::{
    aotc, bootstrap_catt, catt, pct_reduction, BootstrapOptions, EstimandError,
};
use crate::glm::LogisticOptions;
use crate::model::{ModelParams, ModelSpec, ParamId, SensitivityConfig, XiMode};
use crate::propensity::{fit_propensity, PropensityError};

/// `eta_n` values swept when no grid is given, in outcome units.
pub const DEFAULT_GRID: [f64; 5] = [-400.0, -200.0, 0.0, 200.0, 400.0];

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("sensitivity grid is empty")]
    EmptyGrid,
    #[error("grid value {0} is not finite")]
    NonFiniteGrid(f64),
    #[error("grid value {0} appears more than once")]
    DuplicateGrid(f64),
    #[error("data not estimable: {0}")]
    Data(#[from] crate::data::DataError),
    #[error("propensity fit failed: {0}")]
    Propensity(#[from] PropensityError),
    #[error("every grid point failed: {}", .0.join("; "))]
    AllFailed(Vec<String>),
    #[error(transparent)]
    Estimand(#[from] EstimandError),
    #[error("failed to write table: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to write table: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed to write report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridOptions {
    pub fit: FitOptions,
    pub propensity: LogisticOptions,
    /// Bootstrap of the CATT at each grid point. Its replicates start from
    /// the grid point's own estimate unless a warm start is set.
    pub bootstrap: Option<BootstrapOptions>,
}

/// An estimate with its standard error when one is available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowEstimates {
    pub alpha0: Estimate,
    pub alpha: Estimate,
    pub xi: Estimate,
    pub cate: Estimate,
    /// SE from the bootstrap, when it ran.
    pub catt: Estimate,
    pub catt_ci_percentile: Option<(f64, f64)>,
    pub pct_reduction: f64,
    pub params: ModelParams,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub eta_n: f64,
    pub estimates: Option<RowEstimates>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub eta_c_fixed: f64,
    pub xi_mode: String,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub bootstrap_b: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityTable {
    pub config: ConfigEcho,
    pub aotc: f64,
    pub propensity_coefficients: Vec<f64>,
    /// Sorted by `eta_n`.
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityTable {
    pub fn row(&self, eta_n: f64) -> Option<&SensitivityRow> {
        self.rows.iter().find(|r| r.eta_n == eta_n)
    }
}

fn checked_grid(grid: &[f64]) -> Result<Vec<f64>, SensitivityError> {
    if grid.is_empty() {
        return Err(SensitivityError::EmptyGrid);
    }
    if let Some(&v) = grid.iter().find(|v| !v.is_finite()) {
        return Err(SensitivityError::NonFiniteGrid(v));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(SensitivityError::DuplicateGrid(w[0]));
    }
    Ok(sorted)
}

/// Whether `a` is a better fit than `b`: converged beats unconverged, then a
/// log-likelihood gain larger than the convergence resolution.
fn improves(a: &FitResult, b: &FitResult, tol: f64) -> bool {
    if a.converged != b.converged {
        return a.converged;
    }
    a.loglik() > b.loglik() + 10.0 * tol * b.loglik().abs()
}

/// Refits one grid point from every other point's first-pass solution and
/// keeps the best fit, then attaches standard errors.
fn refine(
    dataset: &Dataset,
    scores: &[f64],
    spec: &ModelSpec,
    own: Result<FitResult, String>,
    others: &[ModelParams],
    options: &FitOptions,
) -> Result<FitResult, String> {
    let single = FitOptions {
        n_restarts: 1,
        compute_se: false,
        ..options.clone()
    };
    let mut best = own.ok();
    let mut first_error = None;
    for start in others {
        let candidate = FitOptions {
            warm_start: Some(*start),
            ..single.clone()
        };
        match fit_em(dataset, scores, spec, &candidate) {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| improves(&fit, b, options.tol)) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e.to_string());
            }
        }
    }
    let Some(mut fit) = best else {
        return Err(first_error.unwrap_or_else(|| "no starting point converged".into()));
    };
    if options.compute_se {
        fit.se = opg_se(&fit.params, spec, dataset, scores).map_err(|e| e.to_string())?;
    }
    Ok(fit)
}

fn row_estimates(
    dataset: &Dataset,
    scores: &[f64],
    spec: &ModelSpec,
    fit: FitResult,
    options: &GridOptions,
) -> Result<RowEstimates, String> {
    let catt_value = catt(&fit.params, dataset, scores).map_err(|e| e.to_string())?;
    let aotc_value = aotc(dataset).map_err(|e| e.to_string())?;
    let boot = match &options.bootstrap {
        Some(b) => {
            let mut b = b.clone();
            if b.fit.warm_start.is_none() {
                b.fit.warm_start = Some(fit.params);
            }
            Some(bootstrap_catt(dataset, spec, &b).map_err(|e| e.to_string())?)
        }
        None => None,
    };
    let est = |id: ParamId| Estimate {
        value: fit.params.get(id),
        se: fit.se_of(id),
    };
    Ok(RowEstimates {
        alpha0: est(ParamId::Alpha0),
        alpha: est(ParamId::Alpha),
        xi: est(ParamId::Xi),
        cate: est(ParamId::ThetaC),
        catt: Estimate {
            value: catt_value,
            se: boot.as_ref().map(|b| b.se),
        },
        catt_ci_percentile: boot.as_ref().map(|b| b.ci_percentile),
        pct_reduction: pct_reduction(catt_value, aotc_value).map_err(|e| e.to_string())?,
        params: fit.params,
        loglik: fit.loglik(),
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

/// Fits the model at every `eta_n` in `grid`, holding `xi` mode and `eta_c`
/// at `base`. The propensity score is fitted once and shared. Grid points
/// that fail become rows carrying the error message.
///
/// Each point is first fitted from its own starts. Each point is then
/// refitted from every other point's solution, since a neighbouring mode
/// is often the better start for a mixture likelihood; the highest
/// log-likelihood wins. The result does not depend on grid order.
pub fn run_grid(
    dataset: &Dataset,
    grid: &[f64],
    base: SensitivityConfig,
    options: &GridOptions,
) -> Result<SensitivityTable, SensitivityError> {
    let grid = checked_grid(grid)?;
    dataset.ensure_estimable()?;
    let ps = fit_propensity(dataset, &options.propensity)?;
    let aotc_value = aotc(dataset)?;
    let spec_at = |eta_n: f64| ModelSpec::Sensitivity(SensitivityConfig { eta_n, ..base });

    let cold_options = FitOptions {
        compute_se: false,
        ..options.fit.clone()
    };
    let first: Vec<Result<FitResult, String>> = map_grid(&grid, |k| {
        fit_em(dataset, &ps.scores, &spec_at(grid[k]), &cold_options).map_err(|e| e.to_string())
    });
    let rows = map_grid(&grid, |k| {
        let eta_n = grid[k];
        let spec = spec_at(eta_n);
        let others: Vec<ModelParams> = first
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .filter_map(|(_, f)| f.as_ref().ok().map(|f| f.params))
            .collect();
        let result = refine(dataset, &ps.scores, &spec, first[k].clone(), &others, &options.fit)
            .and_then(|fit| row_estimates(dataset, &ps.scores, &spec, fit, options));
        match result {
            Ok(r) => SensitivityRow {
                eta_n,
                estimates: Some(r),
                error: None,
            },
            Err(e) => SensitivityRow {
                eta_n,
                estimates: None,
                error: Some(e),
            },
        }
    });
    if rows.iter().all(|r| r.estimates.is_none()) {
        return Err(SensitivityError::AllFailed(
            rows.iter()
                .map(|r| format!("eta_n = {}: {}", r.eta_n, r.error.as_deref().unwrap_or("")))
                .collect(),
        ));
    }
    Ok(SensitivityTable {
        config: ConfigEcho {
            eta_c_fixed: base.eta_c,
            xi_mode: base.xi_mode.to_string(),
            grid,
            seed: options.fit.seed,
            bootstrap_b: options.bootstrap.as_ref().map(|b| b.b),
        },
        aotc: aotc_value,
        propensity_coefficients: ps.coefficients,
        rows,
    })
}

/// Applies `f` to every grid index, in parallel when enabled; results stay
/// in grid order.
#[cfg(feature = "parallel")]
fn map_grid<T, F>(grid: &[f64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..grid.len()).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_grid<T, F>(grid: &[f64], f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..grid.len()).map(f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionRow {
    pub eta_n: f64,
    pub catt: Option<f64>,
    pub aotc: f64,
    pub pct_reduction: Option<f64>,
}

/// Percentage reduction for every grid row against the dataset AOTC.
/// Failed grid rows stay empty.
pub fn reduction_table(
    table: &SensitivityTable,
    dataset: &Dataset,
) -> Result<Vec<ReductionRow>, EstimandError> {
    let a = aotc(dataset)?;
    table
        .rows
        .iter()
        .map(|r| {
            let catt = r.estimates.as_ref().map(|e| e.catt.value);
            let pct = catt.map(|c| pct_reduction(c, a)).transpose()?;
            Ok(ReductionRow {
                eta_n: r.eta_n,
                catt,
                aotc: a,
                pct_reduction: pct,
            })
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One line per parameter, one estimate column and one SE column per
/// `eta_n`. Failed grid points leave their cells empty.
pub fn write_parameter_table<W: Write>(
    table: &SensitivityTable,
    sink: W,
) -> Result<(), SensitivityError> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["parameter".to_string()];
    for r in &table.rows {
        header.push(format!("eta_n={}", r.eta_n));
        header.push(format!("se(eta_n={})", r.eta_n));
    }
    w.write_record(&header)?;
    type Pick = fn(&RowEstimates) -> Estimate;
    let lines: [(&str, Pick); 5] = [
        ("alpha0", |e| e.alpha0),
        ("alpha", |e| e.alpha),
        ("xi", |e| e.xi),
        ("cate", |e| e.cate),
        ("catt", |e| e.catt),
    ];
    for (name, pick) in lines {
        let mut rec = vec![name.to_string()];
        for r in &table.rows {
            let e = r.estimates.as_ref().map(pick);
            rec.push(cell(e.map(|e| e.value)));
            rec.push(cell(e.and_then(|e| e.se)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `eta_n, catt, aotc, pct_reduction` per grid row.
pub fn write_reduction_table<W: Write>(
    rows: &[ReductionRow],
    sink: W,
) -> Result<(), SensitivityError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["eta_n", "catt", "aotc", "pct_reduction"])?;
    for r in rows {
        w.write_record([
            r.eta_n.to_string(),
            cell(r.catt),
            r.aotc.to_string(),
            cell(r.pct_reduction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The whole table as pretty-printed JSON.
pub fn write_json_report<W: Write>(
    table: &SensitivityTable,
    sink: W,
) -> Result<(), SensitivityError> {
    serde_json::to_writer_pretty(sink, table)?;
    Ok(())
}

/// Base configuration for a sweep: `xi` free, `eta_c = 0`.
pub fn default_base() -> SensitivityConfig {
    SensitivityConfig {
        xi_mode: XiMode::Free,
        eta_c: 0.0,
        eta_n: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_sorted_and_checked() {
        assert_eq!(checked_grid(&[400.0, -400.0, 0.0]).unwrap(), vec![-400.0, 0.0, 400.0]);
        assert!(matches!(checked_grid(&[]), Err(SensitivityError::EmptyGrid)));
        assert!(matches!(
            checked_grid(&[1.0, 2.0, 1.0]),
            Err(SensitivityError::DuplicateGrid(v)) if v == 1.0
        ));
        assert!(matches!(
            checked_grid(&[f64::NAN]),
            Err(SensitivityError::NonFiniteGrid(_))
        ));
    }

    #[test]
    fn default_grid_is_valid() {
        assert_eq!(checked_grid(&DEFAULT_GRID).unwrap(), DEFAULT_GRID.to_vec());
    }
}
