//! Browser demo: simulate a confounded two-stratum design, inspect balance,
//! fit the model and trace the CATT over a sensitivity grid.
//!
//! The `*_view` functions are plain Rust and return serializable values; the
//! `#[wasm_bindgen]` exports wrap them and return JSON strings.

use pstrat::em::{fit_em, FitOptions};
use pstrat::estimands::{aotc, catt, pct_reduction, prob_never_treated};
use pstrat::model::{ModelParams, ModelSpec, SensitivityConfig, XiMode};
use pstrat::propensity::{balance, fit_propensity};
use pstrat::sensitivity::{run_grid, GridOptions};
use pstrat::simulate::{
    generate, true_catt, Confounding, CovariateDistribution, CovariateSpec, GeneratorSpec,
};
use pstrat::Dataset;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Knobs of the simulated design exposed on the page.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Design {
    pub n: usize,
    pub seed: u64,
    /// Effect of each covariate on the treatment log-odds.
    pub ps_slope: f64,
    /// True confounding of the stratum model by treatment.
    pub xi: f64,
    /// True confounding of the never-user outcome by treatment.
    pub eta_n: f64,
}

impl Design {
    fn spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            n: self.n,
            covariates: vec![
                CovariateSpec {
                    name: "income".into(),
                    distribution: CovariateDistribution::StandardNormal,
                },
                CovariateSpec {
                    name: "owner".into(),
                    distribution: CovariateDistribution::Bernoulli { p: 0.4 },
                },
            ],
            ps_coefficients: vec![-1.0, self.ps_slope, self.ps_slope],
            true_params: structural(),
            confounding: Confounding {
                xi: self.xi,
                eta_n: self.eta_n,
                eta_c: 0.0,
            },
            seed: self.seed,
            omit_covariate: None,
            span_label: "demo".into(),
        }
    }

    fn truth(&self) -> ModelParams {
        ModelParams {
            xi: self.xi,
            eta_n: self.eta_n,
            ..structural()
        }
    }
}

/// Outcome scale loosely follows cash holdings in thousands.
fn structural() -> ModelParams {
    ModelParams {
        alpha0: 0.5,
        alpha: -1.0,
        xi: 0.0,
        beta_c0: 2000.0,
        beta_c1: 500.0,
        theta_c: -1500.0,
        eta_c: 0.0,
        beta_n0: 800.0,
        beta_n1: 300.0,
        eta_n: 0.0,
        sigma2: 300.0 * 300.0,
    }
}

struct Simulated {
    dataset: Dataset,
    scores: Vec<f64>,
    true_catt: f64,
}

fn simulate(design: &Design) -> Result<Simulated, String> {
    if design.n < 50 || design.n > 50_000 {
        return Err(format!("n must lie in [50, 50000], got {}", design.n));
    }
    let (dataset, truth) = generate(&design.spec()).map_err(|e| e.to_string())?;
    dataset.ensure_estimable().map_err(|e| e.to_string())?;
    let scores = fit_propensity(&dataset, &Default::default())
        .map_err(|e| format!("propensity model: {e}"))?
        .scores;
    let true_catt = true_catt(&truth).map_err(|e| e.to_string())?;
    Ok(Simulated {
        dataset,
        scores,
        true_catt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsdRow {
    pub covariate: String,
    pub asd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceView {
    pub n: usize,
    pub treated: usize,
    pub asd: Vec<AsdRow>,
    /// Shared bin edges of the two score histograms.
    pub edges: Vec<f64>,
    pub treated_counts: Vec<usize>,
    pub untreated_counts: Vec<usize>,
}

pub fn balance_view(design: &Design, bins: usize) -> Result<BalanceView, String> {
    let sim = simulate(design)?;
    let report = balance(&sim.dataset, &sim.scores, bins).map_err(|e| e.to_string())?;
    Ok(BalanceView {
        n: sim.dataset.len(),
        treated: sim.dataset.n_treated(),
        asd: report
            .asd
            .iter()
            .map(|a| AsdRow {
                covariate: a.covariate.clone(),
                asd: a.asd,
            })
            .collect(),
        edges: report.treated.edges.clone(),
        treated_counts: report.treated.counts.clone(),
        untreated_counts: report.untreated.counts.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub name: &'static str,
    pub estimate: f64,
    pub se: Option<f64>,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitView {
    pub params: Vec<ParamRow>,
    pub cate: f64,
    pub catt: f64,
    pub true_catt: f64,
    pub aotc: f64,
    pub pct_reduction: f64,
    pub prob_never_model: f64,
    pub prob_never_moment: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits with `xi` free and `eta_n` fixed at the analyst's assumed value.
pub fn fit_view(design: &Design, eta_n_assumed: f64) -> Result<FitView, String> {
    let sim = simulate(design)?;
    let spec = ModelSpec::Sensitivity(SensitivityConfig {
        xi_mode: XiMode::Free,
        eta_c: 0.0,
        eta_n: eta_n_assumed,
    });
    let fit = fit_em(&sim.dataset, &sim.scores, &spec, &FitOptions::default())
        .map_err(|e| e.to_string())?;
    let truth = design.truth();
    let params = pstrat::model::ParamId::ALL
        .iter()
        .map(|&id| ParamRow {
            name: id.name(),
            estimate: fit.params.get(id),
            se: fit.se_of(id),
            truth: truth.get(id),
        })
        .collect();
    let catt_value = catt(&fit.params, &sim.dataset, &sim.scores).map_err(|e| e.to_string())?;
    let aotc_value = aotc(&sim.dataset).map_err(|e| e.to_string())?;
    let (prob_never_model, prob_never_moment) =
        prob_never_treated(&fit.params, &sim.dataset, &sim.scores).map_err(|e| e.to_string())?;
    Ok(FitView {
        params,
        cate: fit.params.theta_c,
        catt: catt_value,
        true_catt: sim.true_catt,
        aotc: aotc_value,
        pct_reduction: pct_reduction(catt_value, aotc_value).map_err(|e| e.to_string())?,
        prob_never_model,
        prob_never_moment,
        loglik: fit.loglik(),
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub eta_n: f64,
    pub cate: Option<f64>,
    pub catt: Option<f64>,
    pub pct_reduction: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveView {
    pub true_catt: f64,
    pub true_eta_n: f64,
    pub points: Vec<CurvePoint>,
}

/// CATT over `steps` evenly spaced `eta_n` values in `[lo, hi]`.
pub fn sensitivity_view(design: &Design, lo: f64, hi: f64, steps: usize) -> Result<CurveView, String> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || !(2..=41).contains(&steps) {
        return Err("grid needs finite lo < hi and 2 to 41 steps".into());
    }
    let sim = simulate(design)?;
    let grid: Vec<f64> = (0..steps)
        .map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64)
        .collect();
    let options = GridOptions {
        fit: FitOptions {
            n_restarts: 2,
            compute_se: false,
            ..FitOptions::default()
        },
        ..GridOptions::default()
    };
    let table = run_grid(&sim.dataset, &grid, SensitivityConfig::default(), &options)
        .map_err(|e| e.to_string())?;
    let points = table
        .rows
        .iter()
        .map(|r| CurvePoint {
            eta_n: r.eta_n,
            cate: r.estimates.as_ref().map(|e| e.cate.value),
            catt: r.estimates.as_ref().map(|e| e.catt.value),
            pct_reduction: r.estimates.as_ref().map(|e| e.pct_reduction),
            error: r.error.clone(),
        })
        .collect();
    Ok(CurveView {
        true_catt: sim.true_catt,
        true_eta_n: design.eta_n,
        points,
    })
}

fn design(n: u32, seed: u32, ps_slope: f64, xi: f64, eta_n: f64) -> Design {
    Design {
        n: n as usize,
        seed: u64::from(seed),
        ps_slope,
        xi,
        eta_n,
    }
}

fn to_json<T: Serialize>(v: Result<T, String>) -> Result<String, String> {
    v.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
}

/// Balance table and score histograms of a simulated design, as JSON.
#[wasm_bindgen]
pub fn balance_json(n: u32, seed: u32, ps_slope: f64, xi: f64, eta_n: f64, bins: u32) -> Result<String, String> {
    to_json(balance_view(&design(n, seed, ps_slope, xi, eta_n), bins as usize))
}

/// Model fit with an assumed `eta_n`, as JSON.
#[wasm_bindgen]
pub fn fit_json(
    n: u32,
    seed: u32,
    ps_slope: f64,
    xi: f64,
    eta_n: f64,
    eta_n_assumed: f64,
) -> Result<String, String> {
    to_json(fit_view(&design(n, seed, ps_slope, xi, eta_n), eta_n_assumed))
}

/// CATT across an `eta_n` grid, as JSON.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_json(
    n: u32,
    seed: u32,
    ps_slope: f64,
    xi: f64,
    eta_n: f64,
    lo: f64,
    hi: f64,
    steps: u32,
) -> Result<String, String> {
    to_json(sensitivity_view(&design(n, seed, ps_slope, xi, eta_n), lo, hi, steps as usize))
}
