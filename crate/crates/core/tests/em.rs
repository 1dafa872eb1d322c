mod common;

use common::{nelder_mead, recovery_spec, simulate, small_units};
use pstrat::em::{
    e_step, em_iteration, em_trace, fit_em, jittered_start, m_step, opg_se_for, EmError,
    FitOptions,
};
use pstrat::math::{expit, normal_logpdf};
use pstrat::model::{ModelParams, ModelSpec, ParamId, SensitivityConfig, XiMode};
use pstrat::{Dataset, Unit};

fn dataset(units: Vec<Unit>) -> Dataset {
    Dataset::new(units, vec!["x".into()], "t").unwrap()
}

fn free_spec() -> ModelSpec {
    ModelSpec::Sensitivity(SensitivityConfig::default())
}

fn hand_params() -> ModelParams {
    ModelParams {
        alpha0: 0.3,
        alpha: -0.7,
        xi: 0.4,
        beta_c0: 2.0,
        beta_c1: 1.5,
        theta_c: -1.0,
        eta_c: 0.0,
        beta_n0: 0.5,
        beta_n1: -0.25,
        eta_n: 0.2,
        sigma2: 1.7,
    }
}

#[test]
fn e_step_observed_strata_and_symmetry() {
    let units = vec![
        Unit { z: true, d: true, y: 5.0, x: vec![0.0] },
        Unit { z: true, d: false, y: 5.0, x: vec![0.0] },
        Unit { z: false, d: false, y: 1.0, x: vec![0.0] },
    ];
    let d = dataset(units);
    let mut p = hand_params();
    // Equal priors at e = 0, z = 0 and equal means.
    p.alpha0 = 0.0;
    p.beta_c0 = 1.0;
    p.beta_n0 = 1.0;
    let post = e_step(&p, &free_spec(), &d, &[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(post, vec![1.0, 0.0, 0.5]);
}

#[test]
fn e_step_matches_hand_bayes_rule() {
    let p = hand_params();
    let (y, e) = (2.2_f64, 0.35_f64);
    let d = dataset(vec![Unit { z: false, d: false, y, x: vec![e] }]);
    let post = e_step(&p, &free_spec(), &d, &[e]).unwrap();

    let pn = 1.0 / (1.0 + (-(0.3 - 0.7 * e)).exp());
    let dens = |m: f64| (-(y - m).powi(2) / (2.0 * 1.7)).exp() / (2.0 * std::f64::consts::PI * 1.7).sqrt();
    let num = (1.0 - pn) * dens(2.0 + 1.5 * e);
    let den = num + pn * dens(0.5 - 0.25 * e);
    assert!((post[0] - num / den).abs() < 1e-12);
    let never = pn * dens(0.5 - 0.25 * e) / den;
    assert!((post[0] + never - 1.0).abs() < 1e-12);
}

#[test]
fn e_step_survives_underflow_of_both_densities() {
    let p = hand_params();
    let d = dataset(vec![Unit { z: false, d: false, y: 1e4, x: vec![0.5] }]);
    let post = e_step(&p, &free_spec(), &d, &[0.5]).unwrap();
    assert!((0.0..=1.0).contains(&post[0]));
}

#[test]
fn posteriors_sum_to_one_on_simulated_data() {
    let sim = simulate(&recovery_spec(2000, 3));
    let fit = fit_em(&sim.dataset, &sim.scores, &free_spec(), &FitOptions::default()).unwrap();
    let p = fit.params;
    for ((u, &e), &pc) in sim.dataset.units().iter().zip(&sim.scores).zip(&fit.posterior_c) {
        if u.z {
            assert_eq!(pc, if u.d { 1.0 } else { 0.0 });
            continue;
        }
        let lpn = (expit(p.alpha0 + p.alpha * e)).ln();
        let lpc = (1.0 - expit(p.alpha0 + p.alpha * e)).ln();
        let ln = lpn + normal_logpdf(u.y, p.beta_n0 + p.beta_n1 * e, p.sigma2);
        let lc = lpc + normal_logpdf(u.y, p.beta_c0 + p.beta_c1 * e, p.sigma2);
        let m = ln.max(lc);
        let pn = (ln - m).exp() / ((ln - m).exp() + (lc - m).exp());
        assert!((pc + pn - 1.0).abs() < 1e-9, "{pc} + {pn}");
    }
}

/// Ordinary least squares through the normal equations.
fn ols(rows: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let k = rows[0].len();
    let x = nalgebra::DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    let yv = nalgebra::DVector::from_column_slice(y);
    let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * &yv)).unwrap();
    let r = yv - x * &beta;
    (beta.iter().copied().collect(), r.norm_squared())
}

#[test]
fn m_step_with_hard_labels_equals_split_sample_fits() {
    let (units, scores) = small_units(11, 300);
    let d = dataset(units.clone());
    // Label every untreated unit by a fixed rule.
    let labels: Vec<bool> = units
        .iter()
        .enumerate()
        .map(|(i, u)| if u.z { u.d } else { i % 3 != 0 })
        .collect();
    let w: Vec<f64> = labels.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let spec = ModelSpec::Sensitivity(SensitivityConfig {
        xi_mode: XiMode::Free,
        eta_c: 0.0,
        eta_n: 0.0,
    });
    let p = m_step(&w, &spec, &d, &scores).unwrap();

    let mut xc = Vec::new();
    let mut yc = Vec::new();
    let mut xn = Vec::new();
    let mut yn = Vec::new();
    for ((u, &e), &c) in units.iter().zip(&scores).zip(&labels) {
        let z = if u.z { 1.0 } else { 0.0 };
        if c {
            xc.push(vec![1.0, e, z]);
            yc.push(u.y);
        } else {
            xn.push(vec![1.0, e]);
            yn.push(u.y);
        }
    }
    let (bc, ssc) = ols(&xc, &yc);
    let (bn, ssn) = ols(&xn, &yn);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9 * (1.0 + b.abs());
    assert!(close(p.beta_c0, bc[0]) && close(p.beta_c1, bc[1]) && close(p.theta_c, bc[2]));
    assert!(close(p.beta_n0, bn[0]) && close(p.beta_n1, bn[1]));
    assert!(close(p.sigma2, (ssc + ssn) / units.len() as f64));

    // Stratum part: plain logistic regression of the never-user label.
    let features: Vec<Vec<f64>> = units
        .iter()
        .zip(&scores)
        .map(|(u, &e)| vec![e, if u.z { 1.0 } else { 0.0 }])
        .collect();
    let never: Vec<bool> = labels.iter().map(|c| !c).collect();
    let lf = pstrat::propensity::fit_logistic(&features, &never, &Default::default()).unwrap();
    assert!(close(p.alpha0, lf.coefficients[0]));
    assert!(close(p.alpha, lf.coefficients[1]));
    assert!(close(p.xi, lf.coefficients[2]));
}

/// Weighted complete-data log-likelihood, written out independently.
fn complete_loglik(
    v: &[f64],
    units: &[Unit],
    scores: &[f64],
    w: &[f64],
    eta_c: f64,
    eta_n: f64,
) -> f64 {
    let [a0, a, xi, bc0, bc1, th, bn0, bn1, ls2] = v.try_into().unwrap();
    let s2 = ls2.exp();
    let mut ll = 0.0;
    for ((u, &e), &wc) in units.iter().zip(scores).zip(w) {
        let z = if u.z { 1.0 } else { 0.0 };
        let eta = a0 + a * e + xi * z;
        let log_pn = -(1.0 + (-eta).exp()).ln();
        let log_pc = -(1.0 + eta.exp()).ln();
        let lphi = |m: f64| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (u.y - m).powi(2) / (2.0 * s2);
        ll += wc * (log_pc + lphi(bc0 + bc1 * e + z * (th + eta_c)))
            + (1.0 - wc) * (log_pn + lphi(bn0 + bn1 * e + z * eta_n));
    }
    ll
}

#[test]
fn m_step_matches_numerical_maximization() {
    let (units, scores) = small_units(5, 60);
    let d = dataset(units.clone());
    let w: Vec<f64> = units
        .iter()
        .enumerate()
        .map(|(i, u)| if u.z { f64::from(u8::from(u.d)) } else { ((i * 37) % 100) as f64 / 100.0 })
        .collect();
    let (eta_c, eta_n) = (0.3, -0.4);
    let spec = ModelSpec::Sensitivity(SensitivityConfig {
        xi_mode: XiMode::Free,
        eta_c,
        eta_n,
    });
    let p = m_step(&w, &spec, &d, &scores).unwrap();

    let x = nelder_mead(
        |v| -complete_loglik(v, &units, &scores, &w, eta_c, eta_n),
        &[0.0; 9],
        &[0.5; 9],
        1e-15,
    );
    let got = [
        p.alpha0,
        p.alpha,
        p.xi,
        p.beta_c0,
        p.beta_c1,
        p.theta_c,
        p.beta_n0,
        p.beta_n1,
        p.sigma2.ln(),
    ];
    for (j, (g, o)) in got.iter().zip(&x).enumerate() {
        assert!((g - o).abs() < 1e-5, "coordinate {j}: m_step {g} vs oracle {o}");
    }
}

#[test]
fn m_step_rejects_collinear_design() {
    // All untreated with posterior 1: the complier `z` column is empty.
    let units: Vec<Unit> = (0..10)
        .map(|i| Unit { z: false, d: false, y: i as f64, x: vec![0.0] })
        .collect();
    let scores: Vec<f64> = (0..10).map(|i| 0.1 + 0.05 * i as f64).collect();
    let d = dataset(units);
    let err = m_step(&[0.5; 10], &free_spec(), &d, &scores).unwrap_err();
    match err {
        EmError::SingularDesign { columns } => assert!(columns.contains(&"theta_c")),
        EmError::StratumBoundary(_) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn loglik_is_monotone_from_random_starts() {
    for seed in 0..10 {
        let sim = simulate(&recovery_spec(400, 100 + seed));
        let start = jittered_start(&free_spec(), &sim.dataset, &sim.scores, seed).unwrap();
        let (_, trace) = em_trace(&start, &free_spec(), &sim.dataset, &sim.scores, &FitOptions::default())
            .unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0));
        }
    }
}

#[test]
fn repeated_fits_are_identical() {
    let sim = simulate(&recovery_spec(1500, 8));
    let opts = FitOptions { seed: 42, ..FitOptions::default() };
    let a = fit_em(&sim.dataset, &sim.scores, &free_spec(), &opts).unwrap();
    let b = fit_em(&sim.dataset, &sim.scores, &free_spec(), &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fixed_point_after_convergence() {
    let sim = simulate(&recovery_spec(3000, 21));
    let opts = FitOptions::default();
    let fit = fit_em(&sim.dataset, &sim.scores, &free_spec(), &opts).unwrap();
    let next = em_iteration(&fit.params, &free_spec(), &sim.dataset, &sim.scores).unwrap();
    let ll = fit.loglik();
    let spec = free_spec();
    let ll_next = spec.total_loglik(&next, &sim.dataset, &sim.scores).unwrap();
    // The stopping rule holds again at the next iterate.
    assert!((ll_next - ll).abs() < 10.0 * opts.tol * ll.abs());
    // An EM step that gains at most `g` in log-likelihood moves each parameter
    // by at most about sqrt(2 g) standard errors.
    let bound = (2.0 * 10.0 * opts.tol * ll.abs()).sqrt();
    for (id, se) in &fit.se {
        let moved = (next.get(*id) - fit.params.get(*id)).abs() / se;
        assert!(moved < bound, "{id}: moved {moved} SE, bound {bound}");
    }
}

#[test]
fn fixed_point_when_run_to_a_tight_tolerance() {
    // Stopping on a relative log-likelihood change of `tol` leaves parameter
    // steps of order sqrt(tol); run EM until the change is at rounding level
    // and the next step moves every parameter by < 10 tol, relative.
    let tol = FitOptions::default().tol;
    for seed in [21, 22, 23] {
        let sim = simulate(&recovery_spec(3000, seed));
        let opts = FitOptions {
            tol: 1e-15,
            max_iter: 100_000,
            compute_se: false,
            ..FitOptions::default()
        };
        let fit = fit_em(&sim.dataset, &sim.scores, &free_spec(), &opts).unwrap();
        let next = em_iteration(&fit.params, &free_spec(), &sim.dataset, &sim.scores).unwrap();
        for id in free_spec().estimated() {
            let (a, b) = (fit.params.get(id), next.get(id));
            let moved = (b - a).abs() / a.abs().max(1.0);
            assert!(moved < 10.0 * tol, "seed {seed} {id}: relative step {moved:e}");
        }
    }
}

#[test]
fn duplicating_units_shrinks_se_by_root_two() {
    let sim = simulate(&recovery_spec(1500, 4));
    let mut units = sim.dataset.units().to_vec();
    units.extend_from_slice(sim.dataset.units());
    let doubled = Dataset::new(units, sim.dataset.schema().to_vec(), "").unwrap();
    let mut scores = sim.scores.clone();
    scores.extend_from_slice(&sim.scores);

    let opts = FitOptions::default();
    let a = fit_em(&sim.dataset, &sim.scores, &free_spec(), &opts).unwrap();
    let b = fit_em(&doubled, &scores, &free_spec(), &opts).unwrap();
    for ((id, sa), (_, sb)) in a.se.iter().zip(&b.se) {
        let ratio = sb / sa;
        assert!(
            (ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.01 * std::f64::consts::FRAC_1_SQRT_2,
            "{id}: ratio {ratio}"
        );
    }
}

#[test]
fn theta_c_and_eta_c_together_are_not_identified() {
    let sim = simulate(&recovery_spec(1500, 6));
    let fit = fit_em(&sim.dataset, &sim.scores, &free_spec(), &FitOptions::default()).unwrap();
    let mut free = free_spec().estimated();
    free.push(ParamId::EtaC);
    match opg_se_for(&fit.params, &free_spec(), &sim.dataset, &sim.scores, &free) {
        Err(EmError::SingularOpg { condition, null_direction }) => {
            assert!(condition >= 1e10);
            let get = |p| null_direction.iter().find(|(q, _)| *q == p).unwrap().1;
            assert!((get(ParamId::ThetaC) + get(ParamId::EtaC)).abs() < 1e-3);
            assert!(get(ParamId::ThetaC).abs() > 0.99);
        }
        other => panic!("expected a singular OPG matrix, got {other:?}"),
    }
}

#[test]
fn separated_outcomes_collapse_posteriors() {
    // Strata a thousand noise SDs apart: every untreated unit is classifiable.
    let (mut units, scores) = small_units(9, 400);
    let mut labels = Vec::new();
    for (i, u) in units.iter_mut().enumerate() {
        let complier = if u.z { u.d } else { i % 2 == 0 };
        if complier {
            u.y += 1000.0;
        }
        labels.push(complier);
    }
    let d = dataset(units);
    let fit = fit_em(&d, &scores, &free_spec(), &FitOptions::default()).unwrap();
    for (pc, &c) in fit.posterior_c.iter().zip(&labels) {
        assert!((pc - f64::from(u8::from(c))).abs() < 1e-9);
    }
    let hard: Vec<f64> = labels.iter().map(|&c| f64::from(u8::from(c))).collect();
    let oracle = m_step(&hard, &free_spec(), &d, &scores).unwrap();
    for id in free_spec().estimated() {
        let (a, b) = (fit.params.get(id), oracle.get(id));
        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{id}: {a} vs {b}");
    }
}

#[test]
fn no_treated_never_users_is_a_boundary_error() {
    let (units, scores) = small_units(12, 200);
    let units: Vec<Unit> = units
        .into_iter()
        .map(|mut u| {
            if u.z {
                u.d = true;
            }
            u
        })
        .collect();
    let d = dataset(units);
    assert!(fit_em(&d, &scores, &free_spec(), &FitOptions::default()).is_err());
}
