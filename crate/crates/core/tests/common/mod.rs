#![allow(dead_code)]

use pstrat::model::ModelParams;
use pstrat::propensity::fit_propensity;
use pstrat::simulate::{
    generate, Confounding, CovariateDistribution, CovariateSpec, GeneratorSpec, TruthRecord,
};
use pstrat::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const THETA_C: f64 = -1500.0;
pub const XI: f64 = -1.0;
pub const ETA_N: f64 = 200.0;
pub const SIGMA: f64 = 300.0;

pub fn true_params() -> ModelParams {
    ModelParams {
        alpha0: 0.5,
        alpha: -1.0,
        xi: 0.0,
        beta_c0: 2000.0,
        beta_c1: 500.0,
        theta_c: THETA_C,
        eta_c: 0.0,
        beta_n0: 800.0,
        beta_n1: 300.0,
        eta_n: 0.0,
        sigma2: SIGMA * SIGMA,
    }
}

/// Recovery design: two covariates, confounded strata and outcomes.
pub fn recovery_spec(n: usize, seed: u64) -> GeneratorSpec {
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
        ps_coefficients: vec![-1.0, 0.8, 0.5],
        true_params: true_params(),
        confounding: Confounding {
            xi: XI,
            eta_n: ETA_N,
            eta_c: 0.0,
        },
        seed,
        omit_covariate: None,
        span_label: "sim".into(),
    }
}

pub struct Simulated {
    pub dataset: Dataset,
    pub truth: TruthRecord,
    pub scores: Vec<f64>,
}

pub fn simulate(spec: &GeneratorSpec) -> Simulated {
    let (dataset, truth) = generate(spec).expect("valid generator spec");
    let scores = fit_propensity(&dataset, &Default::default())
        .expect("propensity fit")
        .scores;
    Simulated {
        dataset,
        truth,
        scores,
    }
}

/// Nelder-Mead minimizer, restarted from its own optimum until a restart no
/// longer improves the objective.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: &[f64], ftol: f64) -> Vec<f64> {
    let mut best = x0.to_vec();
    let mut fbest = f(&best);
    for _ in 0..50 {
        let (x, fx) = nelder_mead_once(&f, &best, step, ftol, 200_000);
        let improved = fbest - fx > ftol * (1.0 + fx.abs());
        if fx < fbest {
            best = x;
            fbest = fx;
        }
        if !improved {
            break;
        }
    }
    best
}

fn nelder_mead_once(
    f: &impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: &[f64],
    ftol: f64,
    max_eval: usize,
) -> (Vec<f64>, f64) {
    let k = x0.len();
    // Dimension-adaptive coefficients.
    let kf = k as f64;
    let (alpha, gamma, rho, shrink) = (1.0, 1.0 + 2.0 / kf, 0.75 - 1.0 / (2.0 * kf), 1.0 - 1.0 / kf);
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..k {
        let mut v = x0.to_vec();
        v[j] += step[j];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = k + 1;
    while evals < max_eval {
        let mut order: Vec<usize> = (0..=k).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[k] - values[0]).abs() <= ftol * (1.0 + values[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..k)
            .map(|j| simplex[..k].iter().map(|v| v[j]).sum::<f64>() / kf)
            .collect();
        let towards = |t: f64| -> Vec<f64> {
            (0..k)
                .map(|j| centroid[j] + t * (simplex[k][j] - centroid[j]))
                .collect()
        };
        let xr = towards(-alpha);
        let fr = f(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = towards(-alpha * gamma);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[k] = xe;
                values[k] = fe;
            } else {
                simplex[k] = xr;
                values[k] = fr;
            }
        } else if fr < values[k - 1] {
            simplex[k] = xr;
            values[k] = fr;
        } else {
            let (xc, fc) = if fr < values[k] {
                let x = towards(-alpha * rho);
                let v = f(&x);
                (x, v)
            } else {
                let x = towards(rho);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < values[k].min(fr) {
                simplex[k] = xc;
                values[k] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=k {
                    for (x, b) in simplex[i].iter_mut().zip(&best) {
                        *x = b + shrink * (*x - b);
                    }
                    values[i] = f(&simplex[i]);
                }
                evals += k;
            }
        }
    }
    let i = (0..=k)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    (simplex[i].clone(), values[i])
}

/// Small dataset on unit outcome scale with a usable mix of arms and strata.
pub fn small_units(seed: u64, n: usize) -> (Vec<pstrat::Unit>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut units = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let e: f64 = rng.random_range(0.1..0.9);
        let z = rng.random_bool(e);
        let complier = rng.random_bool(0.5);
        let mean = if complier {
            1.0 + 0.5 * e - if z { 1.0 } else { 0.0 }
        } else {
            -0.5 + e
        };
        units.push(pstrat::Unit {
            z,
            d: z && complier,
            y: mean + noise.sample(&mut rng),
            x: vec![e],
        });
        scores.push(e);
    }
    (units, scores)
}
