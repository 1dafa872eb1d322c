//! Principal-stratum and outcome models and the observed-data likelihood.
//!
//! Stratum model (never-user log-odds): `alpha0 + alpha * e + xi * z`.
//! Outcome model, with `z1` the assigned and `z2` the observed treatment:
//!
//! * complier: `beta_c0 + z1 * theta_c + z2 * eta_c + e * beta_c1`
//! * never-user: `beta_n0 + z2 * eta_n + e * beta_n1`
//!
//! plus `N(0, sigma2)` noise shared by both strata. The base model is the
//! special case `xi = eta_c = eta_n = 0`; it is also available as a separate
//! code path ([`base`]) so the reduction can be checked rather than assumed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, StratumLabel, Unit};
use crate::math::{expit, log_add_exp, log_expit, normal_logpdf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unit {unit}: non-finite log-likelihood contribution")]
    NonFinite { unit: usize },
    #[error("sigma2 must be positive and finite, got {0}")]
    InvalidVariance(f64),
    #[error("{scores} scores for {units} units")]
    Misaligned { units: usize, scores: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Every coefficient of the stratum and outcome models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha0: f64,
    pub alpha: f64,
    #[serde(default)]
    pub xi: f64,
    pub beta_c0: f64,
    pub beta_c1: f64,
    pub theta_c: f64,
    #[serde(default)]
    pub eta_c: f64,
    pub beta_n0: f64,
    pub beta_n1: f64,
    #[serde(default)]
    pub eta_n: f64,
    pub sigma2: f64,
}

/// Names a single entry of [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamId {
    Alpha0,
    Alpha,
    Xi,
    BetaC0,
    BetaC1,
    ThetaC,
    EtaC,
    BetaN0,
    BetaN1,
    EtaN,
    Sigma2,
}

impl ParamId {
    pub const ALL: [ParamId; 11] = [
        ParamId::Alpha0,
        ParamId::Alpha,
        ParamId::Xi,
        ParamId::BetaC0,
        ParamId::BetaC1,
        ParamId::ThetaC,
        ParamId::EtaC,
        ParamId::BetaN0,
        ParamId::BetaN1,
        ParamId::EtaN,
        ParamId::Sigma2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Alpha0 => "alpha0",
            ParamId::Alpha => "alpha",
            ParamId::Xi => "xi",
            ParamId::BetaC0 => "beta_c0",
            ParamId::BetaC1 => "beta_c1",
            ParamId::ThetaC => "theta_c",
            ParamId::EtaC => "eta_c",
            ParamId::BetaN0 => "beta_n0",
            ParamId::BetaN1 => "beta_n1",
            ParamId::EtaN => "eta_n",
            ParamId::Sigma2 => "sigma2",
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamId::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown parameter `{s}`"))
    }
}

impl ModelParams {
    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Alpha0 => self.alpha0,
            ParamId::Alpha => self.alpha,
            ParamId::Xi => self.xi,
            ParamId::BetaC0 => self.beta_c0,
            ParamId::BetaC1 => self.beta_c1,
            ParamId::ThetaC => self.theta_c,
            ParamId::EtaC => self.eta_c,
            ParamId::BetaN0 => self.beta_n0,
            ParamId::BetaN1 => self.beta_n1,
            ParamId::EtaN => self.eta_n,
            ParamId::Sigma2 => self.sigma2,
        }
    }

    pub fn set(&mut self, id: ParamId, value: f64) {
        let slot = match id {
            ParamId::Alpha0 => &mut self.alpha0,
            ParamId::Alpha => &mut self.alpha,
            ParamId::Xi => &mut self.xi,
            ParamId::BetaC0 => &mut self.beta_c0,
            ParamId::BetaC1 => &mut self.beta_c1,
            ParamId::ThetaC => &mut self.theta_c,
            ParamId::EtaC => &mut self.eta_c,
            ParamId::BetaN0 => &mut self.beta_n0,
            ParamId::BetaN1 => &mut self.beta_n1,
            ParamId::EtaN => &mut self.eta_n,
            ParamId::Sigma2 => &mut self.sigma2,
        };
        *slot = value;
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sigma2 > 0.0 && self.sigma2.is_finite() {
            Ok(())
        } else {
            Err(ModelError::InvalidVariance(self.sigma2))
        }
    }

    /// One `name = value` line per parameter, in declaration order.
    pub fn to_kv_string(&self) -> String {
        ParamId::ALL
            .iter()
            .map(|&id| format!("{} = {}\n", id.name(), self.get(id)))
            .collect()
    }

    /// Parses the format written by [`ModelParams::to_kv_string`]. Blank lines
    /// and `#` comments are ignored; every parameter must appear exactly once.
    pub fn from_kv_str(text: &str) -> Result<ModelParams, ModelError> {
        let mut values: [Option<f64>; 11] = [None; 11];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ModelError::Parse {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `name = value`".into()))?;
            let id: ParamId = key.trim().parse().map_err(err)?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("bad number {:?}", value.trim())))?;
            let slot = &mut values[id as usize];
            if slot.is_some() {
                return Err(err(format!("duplicate `{id}`")));
            }
            *slot = Some(v);
        }
        let mut params = ModelParams::zeroed();
        for id in ParamId::ALL {
            let v = values[id as usize].ok_or_else(|| ModelError::Parse {
                line: 0,
                message: format!("missing `{id}`"),
            })?;
            params.set(id, v);
        }
        Ok(params)
    }

    pub(crate) fn zeroed() -> ModelParams {
        ModelParams {
            alpha0: 0.0,
            alpha: 0.0,
            xi: 0.0,
            beta_c0: 0.0,
            beta_c1: 0.0,
            theta_c: 0.0,
            eta_c: 0.0,
            beta_n0: 0.0,
            beta_n1: 0.0,
            eta_n: 0.0,
            sigma2: 1.0,
        }
    }
}

/// How `xi` is handled during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMode {
    Free,
    Fixed(f64),
}

impl fmt::Display for XiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            XiMode::Free => f.write_str("free"),
            XiMode::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for XiMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("free") {
            return Ok(XiMode::Free);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(XiMode::Fixed)
            .ok_or_else(|| format!("expected `free` or a number, got {s:?}"))
    }
}

/// Sensitivity parameters: `eta_c` and `eta_n` are always fixed inputs;
/// `xi` is either estimated or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub xi_mode: XiMode,
    pub eta_c: f64,
    pub eta_n: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            xi_mode: XiMode::Free,
            eta_c: 0.0,
            eta_n: 0.0,
        }
    }
}

/// Which likelihood a fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// Stratum and outcome models without confounding terms.
    Base,
    Sensitivity(SensitivityConfig),
}

impl ModelSpec {
    /// Parameters estimated from data, in reporting order.
    pub fn estimated(&self) -> Vec<ParamId> {
        use ParamId::*;
        let mut ids = vec![Alpha0, Alpha];
        if let ModelSpec::Sensitivity(SensitivityConfig {
            xi_mode: XiMode::Free,
            ..
        }) = self
        {
            ids.push(Xi);
        }
        ids.extend([BetaC0, BetaC1, ThetaC, BetaN0, BetaN1, Sigma2]);
        ids
    }

    /// Copies the fixed sensitivity values into `params`.
    pub fn apply_fixed(&self, params: &mut ModelParams) {
        match self {
            ModelSpec::Base => {
                params.xi = 0.0;
                params.eta_c = 0.0;
                params.eta_n = 0.0;
            }
            ModelSpec::Sensitivity(c) => {
                if let XiMode::Fixed(v) = c.xi_mode {
                    params.xi = v;
                }
                params.eta_c = c.eta_c;
                params.eta_n = c.eta_n;
            }
        }
    }

    /// Observed-data log-likelihood contribution of one unit.
    pub fn unit_loglik(&self, params: &ModelParams, unit: &Unit, e: f64) -> f64 {
        match self {
            ModelSpec::Base => base::unit_loglik(params, unit, e),
            ModelSpec::Sensitivity(_) => unit_loglik(params, unit, e),
        }
    }

    /// `(log Pr(S = c, y), log Pr(S = n, y))` for an untreated unit, or the
    /// single observed-stratum term (other entry `-inf`) for a treated unit.
    pub(crate) fn joint_terms(&self, params: &ModelParams, unit: &Unit, e: f64) -> (f64, f64) {
        match self {
            ModelSpec::Base => base::joint_terms(params, unit, e),
            ModelSpec::Sensitivity(_) => joint_terms(params, unit, e),
        }
    }

    pub fn total_loglik(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        scores: &[f64],
    ) -> Result<f64, ModelError> {
        params.validate()?;
        check_aligned(dataset, scores)?;
        let mut total = 0.0;
        for (i, (u, &e)) in dataset.units().iter().zip(scores).enumerate() {
            let l = self.unit_loglik(params, u, e);
            if !l.is_finite() {
                return Err(ModelError::NonFinite { unit: i });
            }
            total += l;
        }
        Ok(total)
    }

    /// Per-unit contributions, in dataset order.
    pub fn unit_logliks(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        scores: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        params.validate()?;
        check_aligned(dataset, scores)?;
        dataset
            .units()
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (u, &e))| {
                let l = self.unit_loglik(params, u, e);
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(ModelError::NonFinite { unit: i })
                }
            })
            .collect()
    }
}

pub(crate) fn check_aligned(dataset: &Dataset, scores: &[f64]) -> Result<(), ModelError> {
    if dataset.len() == scores.len() {
        Ok(())
    } else {
        Err(ModelError::Misaligned {
            units: dataset.len(),
            scores: scores.len(),
        })
    }
}

#[inline]
fn never_logit(params: &ModelParams, e: f64, z: bool) -> f64 {
    params.alpha0 + e * params.alpha + if z { params.xi } else { 0.0 }
}

/// `Pr(S = never_user | e, z) = expit(alpha0 + e * alpha + xi * z)`.
pub fn stratum_prob_never(params: &ModelParams, e: f64, z: bool) -> f64 {
    expit(never_logit(params, e, z))
}

/// Mean potential outcome in stratum `s` under assignment `z1` for a unit
/// whose observed treatment is `z2`.
pub fn outcome_mean(params: &ModelParams, s: StratumLabel, z1: bool, z2: bool, e: f64) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    match s {
        StratumLabel::Complier => {
            params.beta_c0
                + ind(z1) * params.theta_c
                + ind(z2) * params.eta_c
                + e * params.beta_c1
        }
        StratumLabel::NeverUser => params.beta_n0 + ind(z2) * params.eta_n + e * params.beta_n1,
    }
}

fn joint_terms(params: &ModelParams, unit: &Unit, e: f64) -> (f64, f64) {
    let eta = never_logit(params, e, unit.z);
    let lc = log_expit(-eta)
        + normal_logpdf(
            unit.y,
            outcome_mean(params, StratumLabel::Complier, unit.z, unit.z, e),
            params.sigma2,
        );
    let ln = log_expit(eta)
        + normal_logpdf(
            unit.y,
            outcome_mean(params, StratumLabel::NeverUser, unit.z, unit.z, e),
            params.sigma2,
        );
    match (unit.z, unit.d) {
        (true, true) => (lc, f64::NEG_INFINITY),
        (true, false) => (f64::NEG_INFINITY, ln),
        (false, _) => (lc, ln),
    }
}

/// Observed-data log-likelihood of one unit under the sensitivity model.
///
/// Treated units reveal their stratum through `d`; untreated units contribute
/// a two-component mixture, combined in log space.
pub fn unit_loglik(params: &ModelParams, unit: &Unit, e: f64) -> f64 {
    let (lc, ln) = joint_terms(params, unit, e);
    log_add_exp(lc, ln)
}

/// Sum of [`unit_loglik`] over the dataset.
pub fn total_loglik(
    params: &ModelParams,
    dataset: &Dataset,
    scores: &[f64],
) -> Result<f64, ModelError> {
    ModelSpec::Sensitivity(SensitivityConfig::default()).total_loglik(params, dataset, scores)
}

/// The model without confounding terms: `xi`, `eta_c` and `eta_n` are ignored.
pub mod base {
    use super::*;

    pub fn stratum_prob_never(params: &ModelParams, e: f64) -> f64 {
        expit(params.alpha0 + e * params.alpha)
    }

    pub fn outcome_mean(params: &ModelParams, s: StratumLabel, z: bool, e: f64) -> f64 {
        match s {
            StratumLabel::Complier => {
                params.beta_c0 + if z { params.theta_c } else { 0.0 } + e * params.beta_c1
            }
            StratumLabel::NeverUser => params.beta_n0 + e * params.beta_n1,
        }
    }

    pub(crate) fn joint_terms(params: &ModelParams, unit: &Unit, e: f64) -> (f64, f64) {
        let p_never = stratum_prob_never(params, e);
        let lc = (1.0 - p_never).ln()
            + normal_logpdf(
                unit.y,
                outcome_mean(params, StratumLabel::Complier, unit.z, e),
                params.sigma2,
            );
        let ln = p_never.ln()
            + normal_logpdf(
                unit.y,
                outcome_mean(params, StratumLabel::NeverUser, unit.z, e),
                params.sigma2,
            );
        match (unit.z, unit.d) {
            (true, true) => (lc, f64::NEG_INFINITY),
            (true, false) => (f64::NEG_INFINITY, ln),
            (false, _) => (lc, ln),
        }
    }

    pub fn unit_loglik(params: &ModelParams, unit: &Unit, e: f64) -> f64 {
        let (lc, ln) = joint_terms(params, unit, e);
        log_add_exp(lc, ln)
    }

    pub fn total_loglik(
        params: &ModelParams,
        dataset: &Dataset,
        scores: &[f64],
    ) -> Result<f64, ModelError> {
        ModelSpec::Base.total_loglik(params, dataset, scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::normal_pdf;
    use StratumLabel::*;

    fn params() -> ModelParams {
        ModelParams {
            alpha0: 0.4,
            alpha: -1.1,
            xi: 0.0,
            beta_c0: 100.0,
            beta_c1: 50.0,
            theta_c: -30.0,
            eta_c: 0.0,
            beta_n0: 80.0,
            beta_n1: 20.0,
            eta_n: 0.0,
            sigma2: 25.0,
        }
    }

    #[test]
    fn stratum_prob_examples() {
        let mut p = ModelParams::zeroed();
        for e in [0.1, 0.5, 0.9] {
            for z in [false, true] {
                assert_eq!(stratum_prob_never(&p, e, z), 0.5);
            }
        }
        p.xi = 9f64.ln();
        assert!((stratum_prob_never(&p, 0.3, true) - 0.9).abs() < 1e-15);
        assert_eq!(stratum_prob_never(&p, 0.3, false), 0.5);
    }

    #[test]
    fn zero_xi_matches_base_stratum_model() {
        let p = params();
        for i in 1..20 {
            let e = i as f64 / 20.0;
            for z in [false, true] {
                assert_eq!(stratum_prob_never(&p, e, z), base::stratum_prob_never(&p, e));
            }
        }
    }

    #[test]
    fn outcome_mean_examples() {
        let mut p = params();
        p.eta_n = 37.0;
        for z2 in [false, true] {
            assert_eq!(
                outcome_mean(&p, NeverUser, true, z2, 0.3),
                outcome_mean(&p, NeverUser, false, z2, 0.3)
            );
        }
        assert!((outcome_mean(&params(), Complier, false, false, 0.4) - 120.0).abs() < 1e-12);
    }

    #[test]
    fn zero_eta_matches_base_outcome_model() {
        let p = params();
        for i in 1..10 {
            let e = i as f64 / 10.0;
            for z in [false, true] {
                for s in [Complier, NeverUser] {
                    assert_eq!(outcome_mean(&p, s, z, z, e), base::outcome_mean(&p, s, z, e));
                }
            }
        }
    }

    #[test]
    fn treated_never_user_contribution() {
        let mut p = params();
        p.xi = -0.7;
        p.eta_n = 12.0;
        let u = Unit { z: true, d: false, y: 91.0, x: vec![] };
        let e = 0.35;
        let expected = stratum_prob_never(&p, e, true).ln()
            + normal_pdf(91.0, outcome_mean(&p, NeverUser, true, true, e), p.sigma2).ln();
        assert!((unit_loglik(&p, &u, e) - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mixture_collapses() {
        let mut p = params();
        p.beta_n0 = p.beta_c0;
        p.beta_n1 = p.beta_c1;
        let u = Unit { z: false, d: false, y: 118.0, x: vec![] };
        let e = 0.4;
        let single = normal_pdf(118.0, p.beta_c0 + e * p.beta_c1, p.sigma2).ln();
        assert!((unit_loglik(&p, &u, e) - single).abs() < 1e-12);
    }

    #[test]
    fn untreated_mixture_by_hand() {
        let p = params();
        let e = 0.25;
        let y = 104.0;
        let pn = 1.0 / (1.0 + (-(0.4 - 1.1 * 0.25f64)).exp());
        let mc = 100.0 + 50.0 * 0.25;
        let mn = 80.0 + 20.0 * 0.25;
        let dens = |m: f64| (-(y - m) * (y - m) / 50.0).exp() / (50.0 * std::f64::consts::PI).sqrt();
        let expected = ((1.0 - pn) * dens(mc) + pn * dens(mn)).ln();
        let u = Unit { z: false, d: false, y, x: vec![] };
        assert!((unit_loglik(&p, &u, e) - expected).abs() < 1e-12);
    }

    #[test]
    fn extreme_outcomes_stay_finite() {
        let p = params();
        let u = Unit { z: false, d: false, y: 1e5, x: vec![] };
        assert!(unit_loglik(&p, &u, 1e-12).is_finite());
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let mut p = params();
        p.xi = -0.123456789012345;
        p.eta_n = 1e-300;
        let text = p.to_kv_string();
        assert_eq!(ModelParams::from_kv_str(&text).unwrap(), p);
        assert!(ModelParams::from_kv_str("alpha0 = 1\n").is_err());
        let dup = format!("{text}alpha = 2\n");
        assert!(matches!(
            ModelParams::from_kv_str(&dup),
            Err(ModelError::Parse { line: 12, .. })
        ));
        assert!(ModelParams::from_kv_str("bogus = 1").is_err());
    }

    #[test]
    fn xi_mode_parsing() {
        assert_eq!("free".parse::<XiMode>().unwrap(), XiMode::Free);
        assert_eq!("-0.5".parse::<XiMode>().unwrap(), XiMode::Fixed(-0.5));
        assert!("x".parse::<XiMode>().is_err());
    }

    #[test]
    fn estimated_parameter_sets() {
        let free = ModelSpec::Sensitivity(SensitivityConfig::default());
        assert!(free.estimated().contains(&ParamId::Xi));
        let fixed = ModelSpec::Sensitivity(SensitivityConfig {
            xi_mode: XiMode::Fixed(0.0),
            ..Default::default()
        });
        assert!(!fixed.estimated().contains(&ParamId::Xi));
        assert_eq!(ModelSpec::Base.estimated().len(), 8);
        assert!(!free.estimated().contains(&ParamId::EtaC));
    }
}
