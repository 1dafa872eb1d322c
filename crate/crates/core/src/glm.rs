//! Weighted logistic regression by Newton/IRLS with step-halving, and small
//! weighted least-squares solves.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::math::{expit, softplus};

/// Fitted probabilities closer than this to 0 or 1 count as saturated.
pub const SATURATION_EPS: f64 = 1e-10;

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    data: Vec<f64>,
    ncols: usize,
}

impl Design {
    pub fn new(ncols: usize) -> Self {
        Design {
            data: Vec::new(),
            ncols,
        }
    }

    pub fn with_capacity(ncols: usize, nrows: usize) -> Self {
        Design {
            data: Vec::with_capacity(ncols * nrows),
            ncols,
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.ncols, "row length does not match design");
        self.data.extend_from_slice(row);
    }

    pub fn nrows(&self) -> usize {
        self.data.len().checked_div(self.ncols).unwrap_or(0)
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.ncols.max(1))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest absolute gradient component.
    pub tol: f64,
    /// L2 penalty on every coefficient except column 0 (the intercept).
    pub ridge: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iter: 100,
            tol: 1e-8,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogisticError {
    #[error("no convergence after {iterations} iterations (max |gradient| = {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        coefficients: Vec<f64>,
    },
    #[error("quasi-complete separation: fitted probabilities saturate while |coefficients| = {coef_norm:.3e} keeps growing")]
    Separation { coef_norm: f64, coefficients: Vec<f64> },
    #[error("singular information matrix")]
    Singular,
    #[error("design has {rows} rows but {len} targets/weights/offsets")]
    Dimension { rows: usize, len: usize },
    #[error("targets must lie in [0, 1] and weights must be finite and nonnegative")]
    InvalidInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticSolution {
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub max_gradient: f64,
    pub converged: bool,
}

/// Inputs of a weighted logistic fit. `target[i]` may be fractional: a unit
/// with target `t` and weight `w` contributes `w * (t log p + (1 - t) log(1 - p))`,
/// the same as two pseudo-observations with labels 1 and 0 weighted `w t` and
/// `w (1 - t)`.
#[derive(Debug, Clone, Copy)]
pub struct LogisticProblem<'a> {
    pub design: &'a Design,
    pub target: &'a [f64],
    pub weight: Option<&'a [f64]>,
    pub offset: Option<&'a [f64]>,
}

impl LogisticProblem<'_> {
    #[inline]
    fn w(&self, i: usize) -> f64 {
        self.weight.map_or(1.0, |w| w[i])
    }

    #[inline]
    fn linear(&self, i: usize, beta: &[f64]) -> f64 {
        dot(self.design.row(i), beta) + self.offset.map_or(0.0, |o| o[i])
    }

    /// Penalized weighted log-likelihood.
    pub fn log_likelihood(&self, beta: &[f64], ridge: f64) -> f64 {
        let mut ll = 0.0;
        for i in 0..self.design.nrows() {
            let w = self.w(i);
            if w == 0.0 {
                continue;
            }
            let eta = self.linear(i, beta);
            ll += w * (self.target[i] * eta - softplus(eta));
        }
        ll - 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
    }

    /// Gradient of the penalized log-likelihood.
    pub fn gradient(&self, beta: &[f64], ridge: f64) -> Vec<f64> {
        let k = beta.len();
        let mut g = vec![0.0; k];
        for i in 0..self.design.nrows() {
            let w = self.w(i);
            if w == 0.0 {
                continue;
            }
            let r = w * (self.target[i] - expit(self.linear(i, beta)));
            for (gj, xj) in g.iter_mut().zip(self.design.row(i)) {
                *gj += r * xj;
            }
        }
        for j in 1..k {
            g[j] -= ridge * beta[j];
        }
        g
    }

    fn check(&self) -> Result<(), LogisticError> {
        let n = self.design.nrows();
        let lens = [
            Some(self.target.len()),
            self.weight.map(<[f64]>::len),
            self.offset.map(<[f64]>::len),
        ];
        if let Some(len) = lens.into_iter().flatten().find(|&l| l != n) {
            return Err(LogisticError::Dimension { rows: n, len });
        }
        let bad_target = self.target.iter().any(|t| !(0.0..=1.0).contains(t));
        let bad_weight = self
            .weight
            .is_some_and(|w| w.iter().any(|w| !w.is_finite() || *w < 0.0));
        if bad_target || bad_weight {
            return Err(LogisticError::InvalidInput);
        }
        Ok(())
    }

    /// Maximizes the penalized log-likelihood by Newton steps with step-halving,
    /// so the objective never decreases between iterations.
    pub fn solve(
        &self,
        start: Option<&[f64]>,
        options: &LogisticOptions,
    ) -> Result<LogisticSolution, LogisticError> {
        self.check()?;
        let k = self.design.ncols();
        let mut beta = start.map_or_else(|| vec![0.0; k], <[f64]>::to_vec);
        let mut ll = self.log_likelihood(&beta, options.ridge);
        let mut growing = 0usize;
        let mut last_norm = norm(&beta);

        for iter in 0..=options.max_iter {
            let g = self.gradient(&beta, options.ridge);
            let max_g = max_abs(&g);
            if max_g < options.tol {
                return Ok(LogisticSolution {
                    coefficients: beta,
                    log_likelihood: ll,
                    iterations: iter,
                    max_gradient: max_g,
                    converged: true,
                });
            }
            if iter == options.max_iter {
                if self.saturated(&beta) {
                    return Err(LogisticError::Separation {
                        coef_norm: norm(&beta),
                        coefficients: beta,
                    });
                }
                return Err(LogisticError::NonConvergence {
                    iterations: iter,
                    grad_norm: max_g,
                    coefficients: beta,
                });
            }

            let info = self.information(&beta, options.ridge);
            let step = match info.cholesky() {
                Some(ch) => ch.solve(&DVector::from_vec(g.clone())),
                None => {
                    if self.saturated(&beta) {
                        return Err(LogisticError::Separation {
                            coef_norm: norm(&beta),
                            coefficients: beta,
                        });
                    }
                    return Err(LogisticError::Singular);
                }
            };

            // Quadratic regime: the predicted gain is below the resolution of
            // the objective, so a line search would only see rounding noise.
            let predicted: f64 = g.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
            if predicted < 1e-13 * ll.abs().max(1.0) {
                for (b, s) in beta.iter_mut().zip(step.iter()) {
                    *b += s;
                }
                ll = self.log_likelihood(&beta, options.ridge);
                continue;
            }

            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = beta
                    .iter()
                    .zip(step.iter())
                    .map(|(b, s)| b + scale * s)
                    .collect();
                let trial_ll = self.log_likelihood(&trial, options.ridge);
                if trial_ll >= ll {
                    accepted = Some((trial, trial_ll));
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some((b, l)) => {
                    beta = b;
                    ll = l;
                }
                None => {
                    // No ascent direction left at working precision.
                    let total_w: f64 = (0..self.design.nrows()).map(|i| self.w(i)).sum();
                    let converged = max_g < 1e-6 * total_w.max(1.0);
                    if converged {
                        return Ok(LogisticSolution {
                            coefficients: beta,
                            log_likelihood: ll,
                            iterations: iter + 1,
                            max_gradient: max_g,
                            converged,
                        });
                    }
                    return Err(LogisticError::NonConvergence {
                        iterations: iter + 1,
                        grad_norm: max_g,
                        coefficients: beta,
                    });
                }
            }

            let n = norm(&beta);
            growing = if n > last_norm { growing + 1 } else { 0 };
            last_norm = n;
            if growing >= 3 && self.saturated(&beta) {
                return Err(LogisticError::Separation {
                    coef_norm: n,
                    coefficients: beta,
                });
            }
        }
        unreachable!("loop returns on its last iteration")
    }

    fn information(&self, beta: &[f64], ridge: f64) -> DMatrix<f64> {
        let k = beta.len();
        let mut h = DMatrix::<f64>::zeros(k, k);
        for i in 0..self.design.nrows() {
            let w = self.w(i);
            if w == 0.0 {
                continue;
            }
            let p = expit(self.linear(i, beta));
            let v = w * p * (1.0 - p);
            let x = self.design.row(i);
            for a in 0..k {
                let va = v * x[a];
                for b in 0..=a {
                    h[(a, b)] += va * x[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
            if a > 0 {
                h[(a, a)] += ridge;
            }
        }
        h
    }

    fn saturated(&self, beta: &[f64]) -> bool {
        (0..self.design.nrows()).any(|i| {
            self.w(i) > 0.0 && {
                let p = expit(self.linear(i, beta));
                !(SATURATION_EPS..=1.0 - SATURATION_EPS).contains(&p)
            }
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves a symmetric positive-definite system; `None` when it is numerically singular.
///
/// The matrix is equilibrated by its diagonal before factorization so that
/// columns on very different scales do not hide a genuine rank deficiency.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let k = a.nrows();
    let d: Vec<f64> = (0..k).map(|i| a[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let s: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let scaled = DMatrix::from_fn(k, k, |i, j| a[(i, j)] * s[i] * s[j]);
    let eig = scaled.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    if !(min_ev > max_ev * 1e-12) {
        return None;
    }
    let sb = DVector::from_fn(k, |i, _| b[i] * s[i]);
    let x = scaled.cholesky()?.solve(&sb);
    Some(DVector::from_fn(k, |i, _| x[i] * s[i]))
}
