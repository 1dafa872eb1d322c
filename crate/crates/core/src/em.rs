//! Maximum-likelihood fitting by EM over the latent strata of untreated units,
//! with outer-product-of-gradients standard errors.
//!
//! Treated units reveal their stratum (`d = 1` complier, `d = 0` never-user);
//! for untreated units the E-step replaces the stratum by its posterior
//! probability. The M-step then maximizes the expected complete-data
//! log-likelihood exactly: a weighted logistic regression for the stratum
//! model and weighted least squares for the outcome model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::glm::{max_abs, solve_spd, Design, LogisticError, LogisticOptions, LogisticProblem};
use crate::math::{expit, logit};
use crate::model::{check_aligned, ModelError, ModelParams, ModelSpec, ParamId, XiMode};

/// Absolute floor of the relative slack allowed for a log-likelihood decrease
/// between EM iterations.
pub const MONOTONE_SLACK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EmError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unit {unit}: both stratum densities underflow")]
    Degenerate { unit: usize },
    #[error("singular weighted outcome design; collinear columns: {}", columns.join(", "))]
    SingularDesign { columns: Vec<&'static str> },
    #[error("stratum model at the parameter boundary: {0}")]
    StratumBoundary(LogisticError),
    #[error("stratum model M-step failed: {0}")]
    StratumFit(LogisticError),
    #[error("log-likelihood decreased at iteration {iteration}: {before} -> {after}")]
    LikelihoodDecrease {
        iteration: usize,
        before: f64,
        after: f64,
    },
    #[error("all {} restarts failed: {}", .0.len(), .0.join("; "))]
    AllRestartsFailed(Vec<String>),
    #[error("singular OPG matrix (condition number {condition:.3e}); null direction: {}", format_direction(null_direction))]
    SingularOpg {
        condition: f64,
        null_direction: Vec<(ParamId, f64)>,
    },
}

fn format_direction(dir: &[(ParamId, f64)]) -> String {
    dir.iter()
        .filter(|(_, v)| v.abs() > 1e-3)
        .map(|(p, v)| format!("{v:+.3}*{p}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Stop when the relative log-likelihood change falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of starting points; the first is the moment-based start (or
    /// `warm_start`), the rest are jittered copies of it.
    pub n_restarts: usize,
    pub seed: u64,
    pub compute_se: bool,
    pub warm_start: Option<ModelParams>,
    /// Settings of the stratum-model logistic M-step.
    pub logistic: LogisticOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 2000,
            n_restarts: 5,
            seed: 0,
            compute_se: true,
            warm_start: None,
            logistic: LogisticOptions {
                max_iter: 100,
                tol: 1e-10,
                ridge: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestartDiagnostic {
    pub start: usize,
    pub initial: ModelParams,
    pub final_loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: ModelParams,
    /// Observed-data log-likelihood at the start and after every iteration of
    /// the selected run.
    pub loglik_trace: Vec<f64>,
    pub posterior_c: Vec<f64>,
    /// OPG standard errors of the estimated parameters, in reporting order.
    pub se: Vec<(ParamId, f64)>,
    pub converged: bool,
    pub iterations: usize,
    /// Index of the start that produced the returned fit.
    pub selected_start: usize,
    pub restarts_used: usize,
    pub restarts: Vec<RestartDiagnostic>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }

    pub fn se_of(&self, id: ParamId) -> Option<f64> {
        self.se.iter().find(|(p, _)| *p == id).map(|(_, s)| *s)
    }

    /// Plain-text report: parameter table, log-likelihood, iterations and
    /// one line per restart.
    pub fn text_report(&self) -> String {
        use std::fmt::Write;
        let estimated = self.spec.estimated();
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>24} {:>24}  status", "parameter", "estimate", "se");
        for id in ParamId::ALL {
            let se = self.se_of(id).map(|v| v.to_string()).unwrap_or_default();
            let status = if estimated.contains(&id) { "estimated" } else { "fixed" };
            let _ = writeln!(s, "{:<10} {:>24} {:>24}  {status}", id.name(), self.params.get(id), se);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "loglik      {}", self.loglik());
        let _ = writeln!(s, "iterations  {}", self.iterations);
        let _ = writeln!(s, "converged   {}", self.converged);
        let _ = writeln!(s, "selected    start {} of {}", self.selected_start, self.restarts_used);
        for r in &self.restarts {
            let outcome = match (&r.error, r.final_loglik) {
                (Some(e), _) => format!("failed: {e}"),
                (None, Some(ll)) => format!(
                    "loglik {ll} after {} iterations{}",
                    r.iterations,
                    if r.converged { "" } else { " (not converged)" }
                ),
                (None, None) => "no result".to_string(),
            };
            let _ = writeln!(s, "restart {}   {outcome}", r.start);
        }
        s
    }
}

/// Per-dataset quantities reused by every EM iteration.
struct Workspace<'a> {
    dataset: &'a Dataset,
    scores: &'a [f64],
    spec: ModelSpec,
    stratum_design: Design,
    stratum_offset: Option<Vec<f64>>,
    stratum_target: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(dataset: &'a Dataset, scores: &'a [f64], spec: ModelSpec) -> Result<Self, EmError> {
        check_aligned(dataset, scores)?;
        let free_xi = matches!(
            spec,
            ModelSpec::Sensitivity(c) if c.xi_mode == XiMode::Free
        );
        let fixed_xi = match spec {
            ModelSpec::Sensitivity(c) => match c.xi_mode {
                XiMode::Fixed(v) if v != 0.0 => Some(v),
                _ => None,
            },
            ModelSpec::Base => None,
        };
        let k = if free_xi { 3 } else { 2 };
        let mut design = Design::with_capacity(k, dataset.len());
        for (u, &e) in dataset.units().iter().zip(scores) {
            let z = if u.z { 1.0 } else { 0.0 };
            if free_xi {
                design.push_row(&[1.0, e, z]);
            } else {
                design.push_row(&[1.0, e]);
            }
        }
        let stratum_offset = fixed_xi.map(|v| {
            dataset
                .units()
                .iter()
                .map(|u| if u.z { v } else { 0.0 })
                .collect()
        });
        Ok(Workspace {
            dataset,
            scores,
            spec,
            stratum_design: design,
            stratum_offset,
            stratum_target: vec![0.0; dataset.len()],
        })
    }

    fn loglik(&self, params: &ModelParams) -> Result<f64, EmError> {
        Ok(self.spec.total_loglik(params, self.dataset, self.scores)?)
    }

    fn e_step(&self, params: &ModelParams, out: &mut [f64]) -> Result<(), EmError> {
        for (i, (u, &e)) in self.dataset.units().iter().zip(self.scores).enumerate() {
            out[i] = if u.z {
                if u.d {
                    1.0
                } else {
                    0.0
                }
            } else {
                let (lc, ln) = self.spec.joint_terms(params, u, e);
                if lc == f64::NEG_INFINITY && ln == f64::NEG_INFINITY || lc.is_nan() || ln.is_nan()
                {
                    return Err(EmError::Degenerate { unit: i });
                }
                // Pr(c | y) = 1 / (1 + exp(ln - lc))
                expit(lc - ln)
            };
        }
        Ok(())
    }

    /// Maximizes the expected complete-data log-likelihood given posteriors.
    /// `start` warm-starts the stratum logistic fit.
    fn m_step(
        &mut self,
        posterior_c: &[f64],
        start: Option<&ModelParams>,
        logistic: &LogisticOptions,
    ) -> Result<ModelParams, EmError> {
        let mut params = ModelParams::zeroed();
        self.spec.apply_fixed(&mut params);

        for (t, w) in self.stratum_target.iter_mut().zip(posterior_c) {
            *t = 1.0 - w;
        }
        let free_xi = self.stratum_design.ncols() == 3;
        let init = start.map(|p| {
            if free_xi {
                vec![p.alpha0, p.alpha, p.xi]
            } else {
                vec![p.alpha0, p.alpha]
            }
        });
        let problem = LogisticProblem {
            design: &self.stratum_design,
            target: &self.stratum_target,
            weight: None,
            offset: self.stratum_offset.as_deref(),
        };
        let sol = problem.solve(init.as_deref(), logistic).map_err(|e| match e {
            LogisticError::Separation { .. } | LogisticError::Singular => {
                EmError::StratumBoundary(e)
            }
            other => EmError::StratumFit(other),
        })?;
        params.alpha0 = sol.coefficients[0];
        params.alpha = sol.coefficients[1];
        if free_xi {
            params.xi = sol.coefficients[2];
        }

        outcome_m_step(self.dataset, self.scores, posterior_c, &mut params)?;
        Ok(params)
    }
}

const COMPLIER_COLUMNS: [&str; 3] = ["beta_c0", "beta_c1", "theta_c"];
const NEVER_COLUMNS: [&str; 2] = ["beta_n0", "beta_n1"];

/// Weighted least squares for the outcome model given the fixed `eta_c`,
/// `eta_n` already stored in `params`; fills the betas, `theta_c` and `sigma2`.
///
/// Complier rows `[1, e, z]` carry weight `w_c` and response `y - z * eta_c`;
/// never-user rows `[1, e]` carry weight `1 - w_c` and response `y - z * eta_n`.
/// The two blocks share no coefficient, so they are solved separately.
fn outcome_m_step(
    dataset: &Dataset,
    scores: &[f64],
    posterior_c: &[f64],
    params: &mut ModelParams,
) -> Result<(), EmError> {
    let mut ac = [[0.0; 3]; 3];
    let mut bc = [0.0; 3];
    let mut an = [[0.0; 2]; 2];
    let mut bn = [0.0; 2];
    for ((u, &e), &wc) in dataset.units().iter().zip(scores).zip(posterior_c) {
        let z = if u.z { 1.0 } else { 0.0 };
        let xc = [1.0, e, z];
        let yc = u.y - z * params.eta_c;
        for a in 0..3 {
            let wa = wc * xc[a];
            bc[a] += wa * yc;
            for b in 0..3 {
                ac[a][b] += wa * xc[b];
            }
        }
        let wn = 1.0 - wc;
        let xn = [1.0, e];
        let yn = u.y - z * params.eta_n;
        for a in 0..2 {
            let wa = wn * xn[a];
            bn[a] += wa * yn;
            for b in 0..2 {
                an[a][b] += wa * xn[b];
            }
        }
    }
    let bc_sol = solve_block(&ac, &bc, &COMPLIER_COLUMNS)?;
    let bn_sol = solve_block(&an, &bn, &NEVER_COLUMNS)?;
    params.beta_c0 = bc_sol[0];
    params.beta_c1 = bc_sol[1];
    params.theta_c = bc_sol[2];
    params.beta_n0 = bn_sol[0];
    params.beta_n1 = bn_sol[1];

    let mut ss = 0.0;
    for ((u, &e), &wc) in dataset.units().iter().zip(scores).zip(posterior_c) {
        let z = if u.z { 1.0 } else { 0.0 };
        let rc = u.y - (params.beta_c0 + e * params.beta_c1 + z * (params.theta_c + params.eta_c));
        let rn = u.y - (params.beta_n0 + e * params.beta_n1 + z * params.eta_n);
        ss += wc * rc * rc + (1.0 - wc) * rn * rn;
    }
    params.sigma2 = ss / dataset.len() as f64;
    if !(params.sigma2 > 0.0 && params.sigma2.is_finite()) {
        return Err(ModelError::InvalidVariance(params.sigma2).into());
    }
    Ok(())
}

fn solve_block<const K: usize>(
    a: &[[f64; K]; K],
    b: &[f64; K],
    names: &[&'static str; K],
) -> Result<[f64; K], EmError> {
    let m = DMatrix::from_fn(K, K, |i, j| a[i][j]);
    let v = DVector::from_fn(K, |i, _| b[i]);
    match solve_spd(&m, &v) {
        Some(x) => Ok(std::array::from_fn(|i| x[i])),
        None => {
            let zero: Vec<&'static str> = (0..K)
                .filter(|&i| !(a[i][i] > 0.0))
                .map(|i| names[i])
                .collect();
            Err(EmError::SingularDesign {
                columns: if zero.is_empty() { names.to_vec() } else { zero },
            })
        }
    }
}

/// Posterior probability of complier membership for every unit (`d` for
/// treated units).
pub fn e_step(
    params: &ModelParams,
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
) -> Result<Vec<f64>, EmError> {
    params.validate()?;
    let ws = Workspace::new(dataset, scores, *spec)?;
    let mut out = vec![0.0; dataset.len()];
    ws.e_step(params, &mut out)?;
    Ok(out)
}

/// Complete-data maximization given posterior complier probabilities.
pub fn m_step(
    posterior_c: &[f64],
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
) -> Result<ModelParams, EmError> {
    if posterior_c.len() != dataset.len() {
        return Err(ModelError::Misaligned {
            units: dataset.len(),
            scores: posterior_c.len(),
        }
        .into());
    }
    let mut ws = Workspace::new(dataset, scores, *spec)?;
    ws.m_step(posterior_c, None, &FitOptions::default().logistic)
}

/// Moment-based starting point: `alpha0` from the observed never-user share
/// among treated units, `alpha = xi = 0`, and outcome coefficients from the
/// M-step with observed strata for treated units and an even split for
/// untreated ones.
pub fn initial_params(
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
) -> Result<ModelParams, EmError> {
    check_aligned(dataset, scores)?;
    let share = dataset
        .never_share_treated()
        .unwrap_or(0.5)
        .clamp(1e-3, 1.0 - 1e-3);
    let mut params = ModelParams::zeroed();
    spec.apply_fixed(&mut params);
    params.alpha0 = logit(share);
    let posterior: Vec<f64> = dataset
        .units()
        .iter()
        .map(|u| match (u.z, u.d) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, _) => 0.5,
        })
        .collect();
    outcome_m_step(dataset, scores, &posterior, &mut params)?;
    Ok(params)
}

fn jitter(base: &ModelParams, spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = *base;
    let coef = Normal::new(0.0, 0.5).expect("valid sd");
    let outcome = Normal::new(0.0, 0.5 * base.sigma2.sqrt()).expect("valid sd");
    p.alpha0 += coef.sample(rng);
    p.alpha += coef.sample(rng);
    if spec.estimated().contains(&ParamId::Xi) {
        p.xi += coef.sample(rng);
    }
    for id in [
        ParamId::BetaC0,
        ParamId::BetaC1,
        ParamId::ThetaC,
        ParamId::BetaN0,
        ParamId::BetaN1,
    ] {
        p.set(id, p.get(id) + outcome.sample(rng));
    }
    p.sigma2 *= rng.random_range(0.5..2.0);
    p
}

struct Run {
    params: ModelParams,
    trace: Vec<f64>,
    converged: bool,
}

fn run_em(
    ws: &mut Workspace<'_>,
    start: &ModelParams,
    options: &FitOptions,
) -> Result<Run, EmError> {
    let mut params = *start;
    ws.spec.apply_fixed(&mut params);
    params.validate()?;
    let mut posterior = vec![0.0; ws.dataset.len()];
    let mut ll = ws.loglik(&params)?;
    let mut trace = vec![ll];
    for iteration in 1..=options.max_iter {
        ws.e_step(&params, &mut posterior)?;
        let next = ws.m_step(&posterior, Some(&params), &options.logistic)?;
        let next_ll = ws.loglik(&next)?;
        if next_ll < ll - MONOTONE_SLACK * ll.abs().max(1.0) {
            return Err(EmError::LikelihoodDecrease {
                iteration,
                before: ll,
                after: next_ll,
            });
        }
        trace.push(next_ll);
        let change = (next_ll - ll).abs();
        params = next;
        let done = change <= options.tol * ll.abs();
        ll = next_ll;
        if done {
            return Ok(Run {
                params,
                trace,
                converged: true,
            });
        }
    }
    Ok(Run {
        params,
        trace,
        converged: false,
    })
}

/// Runs a single EM iteration (E-step then M-step) from `params`.
pub fn em_iteration(
    params: &ModelParams,
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
) -> Result<ModelParams, EmError> {
    let mut ws = Workspace::new(dataset, scores, *spec)?;
    let mut posterior = vec![0.0; dataset.len()];
    ws.e_step(params, &mut posterior)?;
    ws.m_step(&posterior, Some(params), &FitOptions::default().logistic)
}

/// Runs EM from a single starting point and returns the log-likelihood
/// trace, without restarts or standard errors.
pub fn em_trace(
    start: &ModelParams,
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
    options: &FitOptions,
) -> Result<(ModelParams, Vec<f64>), EmError> {
    let mut ws = Workspace::new(dataset, scores, *spec)?;
    let run = run_em(&mut ws, start, options)?;
    Ok((run.params, run.trace))
}

/// Random starting point drawn the way restarts are drawn.
pub fn jittered_start(
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
    seed: u64,
) -> Result<ModelParams, EmError> {
    let base = initial_params(spec, dataset, scores)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(jitter(&base, spec, &mut rng))
}

/// Fits the model by EM from several starting points and keeps the
/// highest-likelihood converged run.
pub fn fit_em(
    dataset: &Dataset,
    scores: &[f64],
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<FitResult, EmError> {
    dataset.ensure_estimable()?;
    let mut ws = Workspace::new(dataset, scores, *spec)?;
    let first = match &options.warm_start {
        Some(p) => {
            let mut p = *p;
            spec.apply_fixed(&mut p);
            p
        }
        None => initial_params(spec, dataset, scores)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let n_starts = options.n_restarts.max(1);
    let mut starts = vec![first];
    for _ in 1..n_starts {
        starts.push(jitter(&first, spec, &mut rng));
    }

    let mut diagnostics = Vec::with_capacity(n_starts);
    let mut best: Option<(usize, Run)> = None;
    for (k, start) in starts.iter().enumerate() {
        match run_em(&mut ws, start, options) {
            Ok(run) => {
                let ll = *run.trace.last().expect("nonempty trace");
                diagnostics.push(RestartDiagnostic {
                    start: k,
                    initial: *start,
                    final_loglik: Some(ll),
                    iterations: run.trace.len() - 1,
                    converged: run.converged,
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((_, b)) => {
                        let bll = *b.trace.last().expect("nonempty trace");
                        (run.converged && !b.converged) || (run.converged == b.converged && ll > bll)
                    }
                };
                if better {
                    best = Some((k, run));
                }
            }
            Err(e) => {
                if matches!(e, EmError::LikelihoodDecrease { .. }) {
                    return Err(e);
                }
                diagnostics.push(RestartDiagnostic {
                    start: k,
                    initial: *start,
                    final_loglik: None,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let Some((selected, run)) = best else {
        return Err(EmError::AllRestartsFailed(
            diagnostics
                .iter()
                .map(|d| format!("start {}: {}", d.start, d.error.as_deref().unwrap_or("?")))
                .collect(),
        ));
    };
    let mut posterior = vec![0.0; dataset.len()];
    ws.e_step(&run.params, &mut posterior)?;
    let se = if options.compute_se {
        opg_se(&run.params, spec, dataset, scores)?
    } else {
        Vec::new()
    };
    Ok(FitResult {
        spec: *spec,
        params: run.params,
        iterations: run.trace.len() - 1,
        loglik_trace: run.trace,
        posterior_c: posterior,
        se,
        converged: run.converged,
        selected_start: selected,
        restarts_used: n_starts,
        restarts: diagnostics,
    })
}

/// OPG standard errors over the parameters the specification estimates.
pub fn opg_se(
    params: &ModelParams,
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
) -> Result<Vec<(ParamId, f64)>, EmError> {
    opg_se_for(params, spec, dataset, scores, &spec.estimated())
}

/// Per-unit score vectors by central finite differences (step `1e-5 * |p|`,
/// at least `1e-7`), one column per entry of `free`.
pub fn unit_scores(
    params: &ModelParams,
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
    free: &[ParamId],
) -> Result<Vec<Vec<f64>>, EmError> {
    let n = dataset.len();
    let mut out = vec![vec![0.0; free.len()]; n];
    for (j, &id) in free.iter().enumerate() {
        let v = params.get(id);
        let h = (1e-5 * v.abs()).max(1e-7);
        let mut plus = *params;
        plus.set(id, v + h);
        let mut minus = *params;
        minus.set(id, v - h);
        let lp = spec.unit_logliks(&plus, dataset, scores)?;
        let lm = spec.unit_logliks(&minus, dataset, scores)?;
        let step = (v + h) - (v - h);
        for i in 0..n {
            out[i][j] = (lp[i] - lm[i]) / step;
        }
    }
    Ok(out)
}

/// Condition-number threshold above which the (correlation-scaled) OPG matrix
/// is treated as singular.
pub const OPG_CONDITION_LIMIT: f64 = 1e10;

/// OPG standard errors for an explicit parameter list.
pub fn opg_se_for(
    params: &ModelParams,
    spec: &ModelSpec,
    dataset: &Dataset,
    scores: &[f64],
    free: &[ParamId],
) -> Result<Vec<(ParamId, f64)>, EmError> {
    let k = free.len();
    let grads = unit_scores(params, spec, dataset, scores, free)?;
    let mut m = DMatrix::<f64>::zeros(k, k);
    for g in &grads {
        for a in 0..k {
            for b in 0..=a {
                m[(a, b)] += g[a] * g[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
    let diag: Vec<f64> = (0..k).map(|i| m[(i, i)]).collect();
    if let Some(j) = diag.iter().position(|&d| !(d > 0.0)) {
        let mut dir = vec![0.0; k];
        dir[j] = 1.0;
        return Err(EmError::SingularOpg {
            condition: f64::INFINITY,
            null_direction: free.iter().copied().zip(dir).collect(),
        });
    }
    let s: Vec<f64> = diag.iter().map(|d| 1.0 / d.sqrt()).collect();
    let corr = DMatrix::from_fn(k, k, |i, j| m[(i, j)] * s[i] * s[j]);
    let eig = corr.clone().symmetric_eigen();
    let (imin, min_ev) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let max_ev = eig.eigenvalues.max();
    let condition = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    if !(condition < OPG_CONDITION_LIMIT) {
        let v = eig.eigenvectors.column(imin);
        let raw: Vec<f64> = (0..k).map(|i| v[i] * s[i]).collect();
        let scale = max_abs(&raw);
        return Err(EmError::SingularOpg {
            condition,
            null_direction: free
                .iter()
                .copied()
                .zip(raw.iter().map(|x| x / scale))
                .collect(),
        });
    }
    let inv_corr = corr
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(EmError::SingularOpg {
            condition,
            null_direction: Vec::new(),
        })?;
    Ok(free
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, (inv_corr[(i, i)] * s[i] * s[i]).sqrt()))
        .collect())
}
