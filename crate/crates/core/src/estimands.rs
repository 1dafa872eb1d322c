//! Complier effects (CATE, CATT), the average outcome of treated compliers,
//! the percentage-reduction ratio, the treated never-user share, and
//! bootstrap inference for the CATT.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::em::{fit_em, FitOptions, FitResult};
use crate::glm::LogisticOptions;
use crate::math::{quantile_sorted, sample_variance};
use crate::model::{stratum_prob_never, ModelParams, ModelSpec, ParamId};
use crate::propensity::fit_propensity;

#[derive(Debug, Error)]
pub enum EstimandError {
    #[error("no treated compliers (z = 1, d = 1): estimand undefined")]
    NoTreatedCompliers,
    #[error("no treated units: estimand undefined")]
    NoTreated,
    #[error("percentage reduction undefined: AOTC equals CATT ({0})")]
    ZeroDenominator(f64),
    #[error("{scores} scores for {units} units")]
    Misaligned { units: usize, scores: usize },
    #[error("bootstrap needs B >= 2, got {0}")]
    TooFewReplicates(usize),
    #[error("{failed} of {requested} bootstrap replicates failed ({})", summarize(taxonomy))]
    BootstrapFailures {
        failed: usize,
        requested: usize,
        taxonomy: Vec<(FailureKind, usize)>,
    },
}

fn summarize(t: &[(FailureKind, usize)]) -> String {
    t.iter()
        .map(|(k, c)| format!("{k:?}: {c}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// `theta_c`. With a fixed `eta_c = v` the data identify `theta_c + v`, so the
/// value is conditional on that choice.
pub fn cate(fit: &FitResult) -> f64 {
    fit.params.theta_c
}

/// Mean over treated compliers of `y - (beta_c0 + e * beta_c1)`.
pub fn catt(params: &ModelParams, dataset: &Dataset, scores: &[f64]) -> Result<f64, EstimandError> {
    aligned(dataset, scores)?;
    let (sum, count) = dataset
        .units()
        .iter()
        .zip(scores)
        .filter(|(u, _)| u.z && u.d)
        .fold((0.0, 0usize), |(s, c), (u, &e)| {
            (s + u.y - (params.beta_c0 + e * params.beta_c1), c + 1)
        });
    if count == 0 {
        return Err(EstimandError::NoTreatedCompliers);
    }
    Ok(sum / count as f64)
}

/// Average observed outcome of treated compliers.
pub fn aotc(dataset: &Dataset) -> Result<f64, EstimandError> {
    let (sum, count) = dataset
        .units()
        .iter()
        .filter(|u| u.z && u.d)
        .fold((0.0, 0usize), |(s, c), u| (s + u.y, c + 1));
    if count == 0 {
        return Err(EstimandError::NoTreatedCompliers);
    }
    Ok(sum / count as f64)
}

/// `catt / (aotc - catt)`: the effect relative to the counterfactual level.
pub fn pct_reduction(catt: f64, aotc: f64) -> Result<f64, EstimandError> {
    let denom = aotc - catt;
    if denom == 0.0 {
        return Err(EstimandError::ZeroDenominator(aotc));
    }
    Ok(catt / denom)
}

/// `Pr(S = n | Z = 1)` from the fitted stratum model averaged over the treated
/// score distribution, and the observed share of non-users among the treated.
pub fn prob_never_treated(
    params: &ModelParams,
    dataset: &Dataset,
    scores: &[f64],
) -> Result<(f64, f64), EstimandError> {
    aligned(dataset, scores)?;
    let treated: Vec<(bool, f64)> = dataset
        .units()
        .iter()
        .zip(scores)
        .filter(|(u, _)| u.z)
        .map(|(u, &e)| (u.d, e))
        .collect();
    if treated.is_empty() {
        return Err(EstimandError::NoTreated);
    }
    let n = treated.len() as f64;
    let model = treated
        .iter()
        .map(|&(_, e)| stratum_prob_never(params, e, true))
        .sum::<f64>()
        / n;
    let moment = treated.iter().filter(|(d, _)| !d).count() as f64 / n;
    Ok((model, moment))
}

fn aligned(dataset: &Dataset, scores: &[f64]) -> Result<(), EstimandError> {
    if dataset.len() != scores.len() {
        return Err(EstimandError::Misaligned {
            units: dataset.len(),
            scores: scores.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Resample lacks an arm, treated users or treated never-users.
    InvalidResample,
    Propensity,
    Em,
    Estimand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    /// Number of replicates.
    pub b: usize,
    pub seed: u64,
    pub propensity: LogisticOptions,
    /// EM settings per replicate. `warm_start` set here starts every
    /// replicate from the same point.
    pub fit: FitOptions,
    /// Maximum tolerated failure share before the whole bootstrap errors.
    pub max_failure_share: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            b: 500,
            seed: 0,
            propensity: LogisticOptions::default(),
            fit: FitOptions {
                n_restarts: 1,
                compute_se: false,
                ..FitOptions::default()
            },
            max_failure_share: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub se: f64,
    /// 2.5% and 97.5% percentiles of the replicate estimates.
    pub ci_percentile: (f64, f64),
    pub requested: usize,
    pub effective: usize,
    pub failures: Vec<(FailureKind, usize)>,
    /// Successful replicate estimates in replicate order.
    pub estimates: Vec<f64>,
}

impl BootstrapResult {
    /// `center -/+ 1.96 * se`.
    pub fn ci_normal(&self, center: f64) -> (f64, f64) {
        (center - 1.959_963_984_540_054 * self.se, center + 1.959_963_984_540_054 * self.se)
    }
}

/// Random stream of replicate `r`: ChaCha8 seeded with `seed`, stream `r`.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

fn one_replicate(
    dataset: &Dataset,
    spec: &ModelSpec,
    options: &BootstrapOptions,
    r: usize,
) -> Result<f64, FailureKind> {
    let mut rng = replicate_rng(options.seed, r);
    let n = dataset.len();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let sample = dataset.resample(&idx);
    if sample.ensure_estimable().is_err() {
        return Err(FailureKind::InvalidResample);
    }
    let ps = fit_propensity(&sample, &options.propensity).map_err(|_| FailureKind::Propensity)?;
    let fit_options = FitOptions {
        seed: options.seed.wrapping_add(r as u64),
        ..options.fit.clone()
    };
    let fit = fit_em(&sample, &ps.scores, spec, &fit_options).map_err(|_| FailureKind::Em)?;
    catt(&fit.params, &sample, &ps.scores).map_err(|_| FailureKind::Estimand)
}

/// Nonparametric bootstrap of the CATT. Each replicate resamples units with
/// replacement, refits the propensity score and the EM model, and recomputes
/// the CATT. Failed replicates are dropped and counted.
pub fn bootstrap_catt(
    dataset: &Dataset,
    spec: &ModelSpec,
    options: &BootstrapOptions,
) -> Result<BootstrapResult, EstimandError> {
    if options.b < 2 {
        return Err(EstimandError::TooFewReplicates(options.b));
    }
    let outcomes = run_replicates(options.b, |r| one_replicate(dataset, spec, options, r));

    let mut estimates = Vec::with_capacity(options.b);
    let mut failures: Vec<(FailureKind, usize)> = Vec::new();
    for o in outcomes {
        match o {
            Ok(v) => estimates.push(v),
            Err(kind) => match failures.iter_mut().find(|(k, _)| *k == kind) {
                Some((_, c)) => *c += 1,
                None => failures.push((kind, 1)),
            },
        }
    }
    failures.sort();
    let failed = options.b - estimates.len();
    if failed as f64 > options.max_failure_share * options.b as f64 || estimates.len() < 2 {
        return Err(EstimandError::BootstrapFailures {
            failed,
            requested: options.b,
            taxonomy: failures,
        });
    }
    let mut sorted = estimates.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        se: sample_variance(&estimates).sqrt(),
        ci_percentile: (quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.975)),
        requested: options.b,
        effective: estimates.len(),
        failures,
        estimates,
    })
}

#[cfg(feature = "parallel")]
fn run_replicates<F>(b: usize, f: F) -> Vec<Result<f64, FailureKind>>
where
    F: Fn(usize) -> Result<f64, FailureKind> + Sync + Send,
{
    use rayon::prelude::*;
    (0..b).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_replicates<F>(b: usize, f: F) -> Vec<Result<f64, FailureKind>>
where
    F: Fn(usize) -> Result<f64, FailureKind>,
{
    (0..b).map(f).collect()
}

/// Every estimand of one fit, as one flat record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimandReport {
    pub cate: f64,
    pub cate_se: Option<f64>,
    /// Fixed `eta_c` the CATE is conditional on.
    pub eta_c: f64,
    pub catt: f64,
    pub catt_se_bootstrap: Option<f64>,
    pub catt_ci_percentile: Option<(f64, f64)>,
    pub catt_ci_normal: Option<(f64, f64)>,
    pub bootstrap_effective: Option<usize>,
    pub aotc: f64,
    pub pct_reduction: f64,
    pub prob_never_treated_model: f64,
    pub prob_never_treated_moment: f64,
}

impl EstimandReport {
    pub fn new(fit: &FitResult, dataset: &Dataset, scores: &[f64]) -> Result<Self, EstimandError> {
        let catt = catt(&fit.params, dataset, scores)?;
        let aotc = aotc(dataset)?;
        let (model, moment) = prob_never_treated(&fit.params, dataset, scores)?;
        Ok(EstimandReport {
            cate: cate(fit),
            cate_se: fit.se_of(ParamId::ThetaC),
            eta_c: fit.params.eta_c,
            catt,
            catt_se_bootstrap: None,
            catt_ci_percentile: None,
            catt_ci_normal: None,
            bootstrap_effective: None,
            aotc,
            pct_reduction: pct_reduction(catt, aotc)?,
            prob_never_treated_model: model,
            prob_never_treated_moment: moment,
        })
    }

    pub fn with_bootstrap(mut self, boot: &BootstrapResult) -> Self {
        self.catt_se_bootstrap = Some(boot.se);
        self.catt_ci_percentile = Some(boot.ci_percentile);
        self.catt_ci_normal = Some(boot.ci_normal(self.catt));
        self.bootstrap_effective = Some(boot.effective);
        self
    }

    pub const CSV_HEADER: [&'static str; 14] = [
        "cate",
        "cate_se",
        "eta_c",
        "catt",
        "catt_se_bootstrap",
        "catt_ci_pct_low",
        "catt_ci_pct_high",
        "catt_ci_normal_low",
        "catt_ci_normal_high",
        "bootstrap_effective",
        "aotc",
        "pct_reduction",
        "prob_never_treated_model",
        "prob_never_treated_moment",
    ];

    /// Values in the order of [`EstimandReport::CSV_HEADER`]; absent values are empty.
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.cate.to_string(),
            opt(self.cate_se),
            self.eta_c.to_string(),
            self.catt.to_string(),
            opt(self.catt_se_bootstrap),
            opt(self.catt_ci_percentile.map(|c| c.0)),
            opt(self.catt_ci_percentile.map(|c| c.1)),
            opt(self.catt_ci_normal.map(|c| c.0)),
            opt(self.catt_ci_normal.map(|c| c.1)),
            self.bootstrap_effective.map(|b| b.to_string()).unwrap_or_default(),
            self.aotc.to_string(),
            self.pct_reduction.to_string(),
            self.prob_never_treated_model.to_string(),
            self.prob_never_treated_moment.to_string(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    fn unit(z: bool, d: bool, y: f64) -> Unit {
        Unit { z, d, y, x: vec![0.0] }
    }

    fn dataset(units: Vec<Unit>) -> Dataset {
        Dataset::new(units, vec!["x".into()], "").unwrap()
    }

    fn params(b0: f64, b1: f64) -> ModelParams {
        let mut p = ModelParams::zeroed();
        p.beta_c0 = b0;
        p.beta_c1 = b1;
        p
    }

    #[test]
    fn catt_single_treated_complier() {
        let d = dataset(vec![unit(true, true, 10.0), unit(false, false, 3.0), unit(true, false, 1.0)]);
        // counterfactual 2 + 0.5 * 4 = 4
        let v = catt(&params(2.0, 4.0), &d, &[0.5, 0.1, 0.9]).unwrap();
        assert!((v - 6.0).abs() < 1e-15);
    }

    #[test]
    fn catt_zero_when_counterfactual_interpolates() {
        let d = dataset(vec![unit(true, true, 3.0), unit(true, true, 5.0), unit(false, false, 9.0)]);
        // y = 1 + 4 e at e = 0.5 and e = 1.0
        let v = catt(&params(1.0, 4.0), &d, &[0.5, 1.0, 0.2]).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn catt_requires_treated_compliers() {
        let d = dataset(vec![unit(true, false, 3.0), unit(false, false, 9.0)]);
        assert!(matches!(
            catt(&params(0.0, 0.0), &d, &[0.5, 0.5]),
            Err(EstimandError::NoTreatedCompliers)
        ));
        assert!(matches!(aotc(&d), Err(EstimandError::NoTreatedCompliers)));
    }

    #[test]
    fn aotc_examples() {
        let d = dataset(vec![unit(true, true, 400.0), unit(true, true, 600.0), unit(false, false, 1.0)]);
        assert_eq!(aotc(&d).unwrap(), 500.0);
        let d = dataset(vec![unit(true, true, 490.2)]);
        assert_eq!(aotc(&d).unwrap(), 490.2);
    }

    #[test]
    fn pct_reduction_examples() {
        assert_eq!(pct_reduction(0.0, 123.0).unwrap(), 0.0);
        assert_eq!(pct_reduction(-250.0, 250.0).unwrap(), -0.5);
        assert!(matches!(pct_reduction(5.0, 5.0), Err(EstimandError::ZeroDenominator(_))));
    }

    #[test]
    fn pct_reduction_is_scale_equivariant() {
        for k in [0.001, 0.5, 3.0, 1e4] {
            let a = pct_reduction(-1698.1, 490.2).unwrap();
            let b = pct_reduction(-1698.1 * k, 490.2 * k).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn moment_share_all_never_users() {
        let d = dataset(vec![unit(true, false, 1.0), unit(true, false, 2.0), unit(false, false, 3.0)]);
        let (_, moment) = prob_never_treated(&params(0.0, 0.0), &d, &[0.2, 0.3, 0.4]).unwrap();
        assert_eq!(moment, 1.0);
    }

    #[test]
    fn replicate_streams_differ_and_repeat() {
        let a: u64 = replicate_rng(5, 0).random();
        let b: u64 = replicate_rng(5, 1).random();
        let c: u64 = replicate_rng(5, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
