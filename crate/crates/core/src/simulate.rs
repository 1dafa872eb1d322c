//! Synthetic datasets drawn from the full generative model with known truth.
//!
//! Per unit: covariates, true propensity `e(x)`, treatment `Z ~ Bernoulli(e)`,
//! stratum from the stratum model including `xi * Z`, outcome from the outcome
//! model including the `eta` terms, and `D = 1` iff `Z = 1` and the unit is a
//! complier.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, StratumLabel, Unit};
use crate::math::expit;
use crate::model::{outcome_mean, stratum_prob_never, ModelParams};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("no treated compliers in the draw")]
    NoTreatedCompliers,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDistribution {
    StandardNormal,
    Bernoulli { p: f64 },
    Uniform { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub distribution: CovariateDistribution,
}

/// True values of the confounding parameters used by the generator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Confounding {
    #[serde(default)]
    pub xi: f64,
    #[serde(default)]
    pub eta_n: f64,
    #[serde(default)]
    pub eta_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    pub covariates: Vec<CovariateSpec>,
    /// Intercept followed by one coefficient per covariate.
    pub ps_coefficients: Vec<f64>,
    /// Structural parameters; `xi`, `eta_c` and `eta_n` must be left at zero
    /// here and set through `confounding`.
    pub true_params: ModelParams,
    #[serde(default)]
    pub confounding: Confounding,
    #[serde(default)]
    pub seed: u64,
    /// Generate with every covariate but leave this one out of the dataset,
    /// so that a propensity model fitted on the output is misspecified.
    #[serde(default)]
    pub omit_covariate: Option<String>,
    #[serde(default)]
    pub span_label: String,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidSpec(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.ps_coefficients.len() != self.covariates.len() + 1 {
            return bad(format!(
                "ps_coefficients has {} entries, expected {} (intercept + covariates)",
                self.ps_coefficients.len(),
                self.covariates.len() + 1
            ));
        }
        for c in &self.covariates {
            match c.distribution {
                CovariateDistribution::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                    return bad(format!("covariate `{}`: bernoulli p = {p} outside [0, 1]", c.name));
                }
                CovariateDistribution::Uniform { a, b } if !(a < b && a.is_finite() && b.is_finite()) => {
                    return bad(format!("covariate `{}`: uniform needs finite a < b", c.name));
                }
                _ => {}
            }
        }
        let p = &self.true_params;
        if !(p.sigma2 > 0.0 && p.sigma2.is_finite()) {
            return bad(format!("true_params.sigma2 must be positive, got {}", p.sigma2));
        }
        if p.xi != 0.0 || p.eta_c != 0.0 || p.eta_n != 0.0 {
            return bad("true_params.xi/eta_c/eta_n must be zero; use [confounding]".into());
        }
        if let Some(name) = &self.omit_covariate {
            if !self.covariates.iter().any(|c| &c.name == name) {
                return bad(format!("omit_covariate `{name}` is not a covariate"));
            }
        }
        Ok(())
    }

    /// Structural parameters with the confounding values filled in.
    pub fn full_params(&self) -> ModelParams {
        let mut p = self.true_params;
        p.xi = self.confounding.xi;
        p.eta_c = self.confounding.eta_c;
        p.eta_n = self.confounding.eta_n;
        p
    }
}

/// Latent quantities of one generated unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthUnit {
    pub index: usize,
    pub z: bool,
    pub stratum: StratumLabel,
    /// True propensity score.
    pub e: f64,
    /// Mean outcome with assigned and observed treatment both 0.
    pub mean_y0: f64,
    /// Mean outcome with assigned and observed treatment both 1.
    pub mean_y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthRecord {
    pub params: ModelParams,
    pub units: Vec<TruthUnit>,
}

/// Draws a dataset and its truth record. Deterministic in `spec.seed`.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, TruthRecord), SimulateError> {
    spec.validate()?;
    let params = spec.full_params();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, params.sigma2.sqrt())
        .map_err(|e| SimulateError::InvalidSpec(e.to_string()))?;
    let omit = spec
        .omit_covariate
        .as_ref()
        .and_then(|name| spec.covariates.iter().position(|c| &c.name == name));

    let mut units = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    let mut x = vec![0.0; spec.covariates.len()];
    for index in 0..spec.n {
        for (xj, c) in x.iter_mut().zip(&spec.covariates) {
            *xj = match c.distribution {
                CovariateDistribution::StandardNormal => StandardNormal.sample(&mut rng),
                CovariateDistribution::Bernoulli { p } => f64::from(u8::from(rng.random_bool(p))),
                CovariateDistribution::Uniform { a, b } => rng.random_range(a..b),
            };
        }
        let lin = spec.ps_coefficients[0]
            + spec.ps_coefficients[1..]
                .iter()
                .zip(&x)
                .map(|(b, v)| b * v)
                .sum::<f64>();
        let e = expit(lin);
        let z = rng.random::<f64>() < e;
        let never = rng.random::<f64>() < stratum_prob_never(&params, e, z);
        let stratum = if never {
            StratumLabel::NeverUser
        } else {
            StratumLabel::Complier
        };
        let y = outcome_mean(&params, stratum, z, z, e) + noise.sample(&mut rng);
        let covariates = x
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != omit)
            .map(|(_, v)| *v)
            .collect();
        units.push(Unit {
            z,
            d: z && !never,
            y,
            x: covariates,
        });
        truth.push(TruthUnit {
            index,
            z,
            stratum,
            e,
            mean_y0: outcome_mean(&params, stratum, false, false, e),
            mean_y1: outcome_mean(&params, stratum, true, true, e),
        });
    }
    let schema = spec
        .covariates
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != omit)
        .map(|(_, c)| c.name.clone())
        .collect();
    let dataset = Dataset::new(units, schema, spec.span_label.clone())?;
    Ok((
        dataset,
        TruthRecord {
            params,
            units: truth,
        },
    ))
}

/// Average of `mean_y1 - mean_y0` over treated compliers, i.e. the
/// `theta_c + eta_c` contrast that the CATT estimator targets.
pub fn true_catt(truth: &TruthRecord) -> Result<f64, SimulateError> {
    let (sum, count) = truth
        .units
        .iter()
        .filter(|u| u.z && u.stratum == StratumLabel::Complier)
        .fold((0.0, 0usize), |(s, c), u| (s + (u.mean_y1 - u.mean_y0), c + 1));
    if count == 0 {
        return Err(SimulateError::NoTreatedCompliers);
    }
    Ok(sum / count as f64)
}

/// Writes `index,z,stratum,e,mean_y0,mean_y1`.
pub fn write_truth<W: Write>(truth: &TruthRecord, sink: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["index", "z", "stratum", "e", "mean_y0", "mean_y1"])?;
    for u in &truth.units {
        w.write_record([
            u.index.to_string(),
            u8::from(u.z).to_string(),
            u.stratum.to_string(),
            u.e.to_string(),
            u.mean_y0.to_string(),
            u.mean_y1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(n: usize, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            n,
            covariates: vec![
                CovariateSpec {
                    name: "x1".into(),
                    distribution: CovariateDistribution::StandardNormal,
                },
                CovariateSpec {
                    name: "x2".into(),
                    distribution: CovariateDistribution::Bernoulli { p: 0.4 },
                },
            ],
            ps_coefficients: vec![-0.8, 0.7, 0.5],
            true_params: ModelParams {
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
            },
            confounding: Confounding::default(),
            seed,
            omit_covariate: None,
            span_label: "sim".into(),
        }
    }

    #[test]
    fn generated_data_is_valid_and_deterministic() {
        let (a, ta) = generate(&spec(2000, 7)).unwrap();
        let (b, tb) = generate(&spec(2000, 7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(a.validate().is_clean(), "{:?}", a.validate());
        let (c, _) = generate(&spec(2000, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn saturated_stratum_model_gives_only_never_users() {
        let mut s = spec(500, 1);
        s.true_params.alpha0 = 20.0;
        let (d, _) = generate(&s).unwrap();
        assert!(d.units().iter().filter(|u| u.z).all(|u| !u.d));
        assert!(d.n_treated() > 0);
    }

    #[test]
    fn true_catt_is_theta_plus_eta_c() {
        let mut s = spec(3000, 3);
        let (_, t) = generate(&s).unwrap();
        assert!((true_catt(&t).unwrap() + 1500.0).abs() < 1e-9);
        s.confounding.eta_c = -200.0;
        let (_, t) = generate(&s).unwrap();
        assert!((true_catt(&t).unwrap() + 1700.0).abs() < 1e-9);
        s.true_params.theta_c = 0.0;
        s.confounding.eta_c = 0.0;
        let (_, t) = generate(&s).unwrap();
        assert_eq!(true_catt(&t).unwrap(), 0.0);
    }

    #[test]
    fn omitted_covariate_is_dropped_from_output() {
        let mut s = spec(50, 2);
        s.omit_covariate = Some("x2".into());
        let (d, _) = generate(&s).unwrap();
        assert_eq!(d.schema(), ["x1"]);
        assert!(d.units().iter().all(|u| u.x.len() == 1));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(10, 0);
        s.true_params.sigma2 = 0.0;
        assert!(generate(&s).is_err());
        let mut s = spec(10, 0);
        s.ps_coefficients.pop();
        assert!(generate(&s).is_err());
        let mut s = spec(0, 0);
        s.n = 0;
        assert!(generate(&s).is_err());
        let mut s = spec(10, 0);
        s.true_params.xi = 1.0;
        assert!(generate(&s).is_err());
    }
}
