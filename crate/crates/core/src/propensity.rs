//! Propensity-score logistic regression with covariate balance and overlap
//! diagnostics.

use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::glm::{dot, Design, LogisticError, LogisticOptions, LogisticProblem};
use crate::math::{expit, mean, sample_variance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropensityError {
    #[error(transparent)]
    Logistic(#[from] LogisticError),
    #[error("features have {rows} rows but {labels} labels")]
    Dimension { rows: usize, labels: usize },
    #[error("feature row {row} has {found} columns, expected {expected}")]
    RaggedFeatures {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("both label classes must be present")]
    SingleClass,
    #[error("covariate vector has length {found}, model expects {expected}")]
    CovariateLength { expected: usize, found: usize },
    #[error("balance needs at least two units in each arm")]
    SmallArm,
    #[error("trim threshold must lie in [0, 0.5), got {0}")]
    InvalidTrim(f64),
    #[error("histogram needs at least one bin")]
    NoBins,
}

/// Fitted main-effects propensity model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityFit {
    /// Intercept first, then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    /// Fitted probability for each training row.
    pub scores: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Ridge penalty used for the fit (0 means plain maximum likelihood).
    pub ridge: f64,
}

/// Maximum-likelihood logistic regression of `labels` on `features` plus an
/// intercept.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[bool],
    options: &LogisticOptions,
) -> Result<PropensityFit, PropensityError> {
    if features.len() != labels.len() {
        return Err(PropensityError::Dimension {
            rows: features.len(),
            labels: labels.len(),
        });
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(PropensityError::SingleClass);
    }
    let k = features.first().map_or(0, Vec::len);
    let mut design = Design::with_capacity(k + 1, features.len());
    let mut row = vec![1.0; k + 1];
    for (i, f) in features.iter().enumerate() {
        if f.len() != k {
            return Err(PropensityError::RaggedFeatures {
                row: i,
                expected: k,
                found: f.len(),
            });
        }
        row[1..].copy_from_slice(f);
        design.push_row(&row);
    }
    let target: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let problem = LogisticProblem {
        design: &design,
        target: &target,
        weight: None,
        offset: None,
    };
    let sol = problem.solve(None, options)?;
    let scores = design
        .rows()
        .map(|r| expit(dot(r, &sol.coefficients)))
        .collect();
    Ok(PropensityFit {
        coefficients: sol.coefficients,
        scores,
        log_likelihood: sol.log_likelihood,
        converged: sol.converged,
        iterations: sol.iterations,
        ridge: options.ridge,
    })
}

/// Fits `z` on the dataset covariates.
pub fn fit_propensity(
    dataset: &Dataset,
    options: &LogisticOptions,
) -> Result<PropensityFit, PropensityError> {
    let features: Vec<Vec<f64>> = dataset.units().iter().map(|u| u.x.clone()).collect();
    let labels: Vec<bool> = dataset.units().iter().map(|u| u.z).collect();
    fit_logistic(&features, &labels, options)
}

/// `expit(intercept + coefficients . x)` for a new covariate vector.
pub fn predict_score(fit: &PropensityFit, x: &[f64]) -> Result<f64, PropensityError> {
    let k = fit.coefficients.len() - 1;
    if x.len() != k {
        return Err(PropensityError::CovariateLength {
            expected: k,
            found: x.len(),
        });
    }
    Ok(expit(fit.coefficients[0] + dot(&fit.coefficients[1..], x)))
}

/// Drops units whose score falls outside `[threshold, 1 - threshold]`.
/// Returns the kept dataset and its aligned scores.
pub fn trim(
    dataset: &Dataset,
    scores: &[f64],
    threshold: f64,
) -> Result<(Dataset, Vec<f64>), PropensityError> {
    if !(0.0..0.5).contains(&threshold) {
        return Err(PropensityError::InvalidTrim(threshold));
    }
    let keep = |e: f64| e >= threshold && e <= 1.0 - threshold;
    let kept = dataset.filter(|i, _| keep(scores[i]));
    let kept_scores = scores.iter().copied().filter(|&e| keep(e)).collect();
    Ok((kept, kept_scores))
}

/// Absolute standardized difference of one covariate between arms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsdEntry {
    pub covariate: String,
    pub asd: f64,
    /// Set when both arms have zero variance for this covariate.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` equally spaced edges on [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Histogram, PropensityError> {
        if bins == 0 {
            return Err(PropensityError::NoBins);
        }
        let edges = (0..=bins).map(|b| b as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Histogram {
            edges,
            counts,
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub asd: Vec<AsdEntry>,
    pub treated: Histogram,
    pub untreated: Histogram,
}

/// Per-covariate ASD:
/// `|mean_1 - mean_0| / sqrt(s_1^2 / N_1 + s_0^2 / N_0)`, with `s_z^2` the
/// sample variance (`N_z - 1` denominator) in arm `z`.
pub fn asd(dataset: &Dataset) -> Result<Vec<AsdEntry>, PropensityError> {
    let (mut x1, mut x0) = (Vec::new(), Vec::new());
    let n1 = dataset.n_treated();
    let n0 = dataset.len() - n1;
    if n1 < 2 || n0 < 2 {
        return Err(PropensityError::SmallArm);
    }
    let mut out = Vec::with_capacity(dataset.schema().len());
    for (j, name) in dataset.schema().iter().enumerate() {
        x1.clear();
        x0.clear();
        for u in dataset.units() {
            if u.z {
                x1.push(u.x[j]);
            } else {
                x0.push(u.x[j]);
            }
        }
        let diff = (mean(&x1) - mean(&x0)).abs();
        let se2 = sample_variance(&x1) / n1 as f64 + sample_variance(&x0) / n0 as f64;
        let (asd, degenerate) = if se2 > 0.0 {
            (diff / se2.sqrt(), false)
        } else if diff > 0.0 {
            (f64::INFINITY, true)
        } else {
            (0.0, true)
        };
        out.push(AsdEntry {
            covariate: name.clone(),
            asd,
            degenerate,
        });
    }
    Ok(out)
}

/// ASD table plus per-arm histograms of the fitted scores.
pub fn balance(
    dataset: &Dataset,
    scores: &[f64],
    bins: usize,
) -> Result<BalanceReport, PropensityError> {
    let asd = asd(dataset)?;
    let arm = |treated: bool| -> Vec<f64> {
        dataset
            .units()
            .iter()
            .zip(scores)
            .filter(|(u, _)| u.z == treated)
            .map(|(_, &e)| e)
            .collect()
    };
    Ok(BalanceReport {
        asd,
        treated: Histogram::new(&arm(true), bins)?,
        untreated: Histogram::new(&arm(false), bins)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    #[test]
    fn predict_closed_forms() {
        let fit = PropensityFit {
            coefficients: vec![0.0, 1.0],
            scores: vec![],
            log_likelihood: 0.0,
            converged: true,
            iterations: 0,
            ridge: 0.0,
        };
        assert_eq!(predict_score(&fit, &[0.0]).unwrap(), 0.5);
        assert!((predict_score(&fit, &[3f64.ln()]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(
            predict_score(&fit, &[1.0, 2.0]),
            Err(PropensityError::CovariateLength { .. })
        ));
        let zero = PropensityFit {
            coefficients: vec![0.0; 3],
            ..fit
        };
        assert_eq!(predict_score(&zero, &[5.0, -7.0]).unwrap(), 0.5);
    }

    #[test]
    fn intercept_only_half_split() {
        let features = vec![Vec::new(); 8];
        let labels = [true, false, true, false, true, false, true, false];
        let fit = fit_logistic(&features, &labels, &LogisticOptions::default()).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!(fit.scores.iter().all(|&s| (s - 0.5).abs() < 1e-12));
    }

    #[test]
    fn independent_binary_covariate_gives_zero_slope() {
        // Every (x, label) cell has the same count.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            features.push(vec![if i % 2 == 0 { -1.0 } else { 1.0 }]);
            labels.push((i / 2) % 2 == 0);
        }
        let fit = fit_logistic(&features, &labels, &LogisticOptions::default()).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-10);
    }

    #[test]
    fn single_class_is_rejected() {
        let err = fit_logistic(&[vec![1.0], vec![2.0]], &[true, true], &Default::default());
        assert_eq!(err.unwrap_err(), PropensityError::SingleClass);
    }

    fn two_arm(xs1: &[f64], xs0: &[f64]) -> Dataset {
        let mut units = Vec::new();
        for (i, &x) in xs1.iter().enumerate() {
            units.push(Unit { z: true, d: i % 2 == 0, y: 0.0, x: vec![x] });
        }
        for &x in xs0 {
            units.push(Unit { z: false, d: false, y: 0.0, x: vec![x] });
        }
        Dataset::new(units, vec!["x".into()], "").unwrap()
    }

    #[test]
    fn identical_arms_have_zero_asd() {
        let d = two_arm(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(asd(&d).unwrap()[0].asd, 0.0);
    }

    #[test]
    fn asd_direct_formula() {
        // Means 1 and 0; variances 8 and 8 with N = 4 each: 8/4 + 8/4 = 4.
        let a = 6f64.sqrt();
        let d = two_arm(&[1.0 - a, 1.0 - a, 1.0 + a, 1.0 + a], &[-a, -a, a, a]);
        assert!((asd(&d).unwrap()[0].asd - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_arms() {
        let d = two_arm(&[1.0, 1.0], &[0.0, 0.0]);
        let e = &asd(&d).unwrap()[0];
        assert!(e.asd.is_infinite() && e.degenerate);
        let d = two_arm(&[1.0, 1.0], &[1.0, 1.0]);
        let e = &asd(&d).unwrap()[0];
        assert_eq!(e.asd, 0.0);
        assert!(e.degenerate);
    }

    #[test]
    fn histogram_counts_sum_to_arm_size() {
        let h = Histogram::new(&[0.0, 0.05, 0.5, 0.999, 1.0], 20).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[19], 2);
        assert_eq!(h.edges.len(), 21);
        assert_eq!((h.min, h.max), (0.0, 1.0));
    }

    #[test]
    fn trimming_drops_extreme_scores() {
        let d = two_arm(&[1.0, 2.0], &[3.0, 4.0]);
        let (kept, s) = trim(&d, &[0.01, 0.5, 0.6, 0.995], 0.02).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(s, vec![0.5, 0.6]);
        assert!(trim(&d, &[0.5; 4], 0.5).is_err());
    }
}
