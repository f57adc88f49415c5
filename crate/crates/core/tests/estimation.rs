use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use sdpd::estimation::{bias_correct, fit_full, fit_joint_null, fit_null_delta, within_ols, FitOptions};
use sdpd::montecarlo::{simulate_panel, McConfig, BETA0};
use sdpd::panel::PanelData;
use sdpd::Error;

fn config(lambda0: f64, delta0: f64) -> McConfig {
    McConfig {
        n: 25,
        periods: 8,
        lambda0,
        delta0,
        seed: 3,
        ..McConfig::default()
    }
}

fn without_y0(d: &PanelData) -> PanelData {
    PanelData::new(
        d.y().clone(),
        None,
        d.x1().to_vec(),
        d.x2().to_vec(),
        d.z().to_vec(),
        d.z0().clone(),
        None,
    )
    .unwrap()
}

#[test]
fn noiseless_outcome_is_degenerate() {
    let cfg = McConfig {
        noise: false,
        ..config(0.0, 0.0)
    };
    let sim = simulate_panel(&cfg, 0).unwrap();
    assert!(matches!(fit_joint_null(&sim.data), Err(Error::DegenerateFit(_))));
}

#[test]
fn joint_null_matches_dummy_variable_regression() {
    let sim = simulate_panel(&config(0.0, 0.0), 1).unwrap();
    let d = &sim.data;
    let (n, t) = (d.n(), d.periods());
    // x1, unit dummies, time dummies 2..T
    let cols = 1 + n + (t - 1);
    let mut x = DMatrix::zeros(n * t, cols);
    let mut y = DVector::zeros(n * t);
    for s in 0..t {
        for i in 0..n {
            let r = s * n + i;
            x[(r, 0)] = d.x1()[s][(i, 0)];
            x[(r, 1 + i)] = 1.0;
            if s > 0 {
                x[(r, n + s)] = 1.0;
            }
            y[r] = d.y()[(i, s)];
        }
    }
    let coef = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
    let fit = fit_joint_null(d).unwrap();
    assert_abs_diff_eq!(fit.theta.beta[0], coef[0], epsilon = 1e-10);
}

#[test]
fn within_ols_recovers_exact_coefficients() {
    let x = DMatrix::from_fn(20, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
    let b = DMatrix::from_column_slice(2, 1, &[1.5, -0.25]);
    let y = &x * &b;
    assert_abs_diff_eq!(within_ols(&x, &y).unwrap(), b, epsilon = 1e-12);
    let singular = DMatrix::from_fn(20, 2, |i, _| i as f64);
    assert!(matches!(within_ols(&singular, &y), Err(Error::Singular(_))));
}

#[test]
fn restricted_fits_are_nested() {
    let sim = simulate_panel(&config(0.2, 0.3), 2).unwrap();
    let opts = FitOptions::default();
    let joint = fit_joint_null(&sim.data).unwrap();
    let null_delta = fit_null_delta(&sim.data, &sim.seq, &opts).unwrap();
    let full = fit_full(&sim.data, &sim.seq, &opts).unwrap();
    assert!(joint.loglik <= null_delta.loglik + 1e-8);
    assert!(null_delta.loglik <= full.loglik + 1e-8);

    assert_eq!(joint.theta.eta(), [0.0; 3]);
    assert!(joint.theta.delta.iter().all(|&v| v == 0.0));
    assert!(null_delta.theta.delta.iter().all(|&v| v == 0.0));
    assert!(full.theta.delta[0] != 0.0);
}

#[test]
fn restricted_eta_stays_at_zero() {
    let sim = simulate_panel(&config(0.2, 0.0), 4).unwrap();
    let opts = FitOptions {
        free_eta: [true, false, false],
        ..FitOptions::default()
    };
    let fit = fit_null_delta(&sim.data, &sim.seq, &opts).unwrap();
    assert_eq!((fit.theta.gamma, fit.theta.rho), (0.0, 0.0));
    assert_eq!((fit.theta_bc.gamma, fit.theta_bc.rho), (0.0, 0.0));
}

#[test]
fn dynamic_terms_need_initial_outcomes() {
    let sim = simulate_panel(&config(0.0, 0.0), 0).unwrap();
    let data = without_y0(&sim.data);
    let r = fit_null_delta(&data, &sim.seq, &FitOptions::default());
    assert!(matches!(r, Err(Error::MissingInitial(_))));
    // the joint null needs no lags
    assert!(fit_joint_null(&data).is_ok());
}

#[test]
fn fits_are_deterministic() {
    let sim = simulate_panel(&config(0.1, 0.0), 5).unwrap();
    let opts = FitOptions::default();
    let a = fit_null_delta(&sim.data, &sim.seq, &opts).unwrap();
    let b = fit_null_delta(&sim.data, &sim.seq, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn multistart_agrees_with_single_start() {
    let sim = simulate_panel(&config(0.2, 0.0), 6).unwrap();
    let single = fit_null_delta(&sim.data, &sim.seq, &FitOptions::default()).unwrap();
    let multi = fit_null_delta(&sim.data, &sim.seq, &FitOptions::default().with_multistart(11)).unwrap();
    for (a, b) in single.theta.eta().iter().zip(multi.theta.eta()) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
    }
    assert!(multi.loglik >= single.loglik - 1e-9);
}

#[test]
fn stored_bias_correction_is_reproducible() {
    let sim = simulate_panel(&config(0.2, 0.0), 7).unwrap();
    let fit = fit_null_delta(&sim.data, &sim.seq, &FitOptions::default()).unwrap();
    let again = bias_correct(&fit, &sim.data, &sim.seq).unwrap();
    assert_abs_diff_eq!(again.pack(), fit.theta_bc.pack(), epsilon = 1e-12);

    let joint = fit_joint_null(&sim.data).unwrap();
    assert_eq!(joint.theta_bc.eta(), [0.0; 3]);
    assert!(joint.theta_bc.delta.iter().all(|&v| v == 0.0));
}

#[test]
fn joint_null_beta_is_centred_on_truth() {
    let cfg = config(0.0, 0.0);
    let reps = 100;
    let mean = (0..reps)
        .map(|r| fit_joint_null(&simulate_panel(&cfg, r).unwrap().data).unwrap().theta_bc.beta[0])
        .sum::<f64>()
        / reps as f64;
    assert!((mean - BETA0).abs() < 0.02, "mean beta {mean}");
}

#[test]
fn bias_corrected_lambda_is_close_to_truth() {
    let cfg = config(0.3, 0.0);
    let reps = 60;
    let opts = FitOptions::default();
    let mean = (0..reps)
        .map(|r| {
            let sim = simulate_panel(&cfg, r).unwrap();
            fit_null_delta(&sim.data, &sim.seq, &opts).unwrap().theta_bc.lambda
        })
        .sum::<f64>()
        / reps as f64;
    assert!((mean - 0.3).abs() < 0.03, "mean lambda {mean}");
}

#[test]
fn full_fit_recovers_endogeneity() {
    let cfg = McConfig {
        n: 49,
        periods: 10,
        ..config(0.0, 0.5)
    };
    let opts = FitOptions::default();
    let reps = 20;
    let mean = (0..reps)
        .map(|r| {
            let sim = simulate_panel(&cfg, r).unwrap();
            fit_full(&sim.data, &sim.seq, &opts).unwrap().theta_bc.delta[0]
        })
        .sum::<f64>()
        / reps as f64;
    assert!((mean - 0.5).abs() < 0.05, "mean delta {mean}");
}
