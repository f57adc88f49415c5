//! Joint-null, delta-null and unrestricted fits on one simulated panel, with the
//! analytic bias correction.
//!
//! cargo run --release --example estimation

use sdpd::estimation::{fit_full, fit_joint_null, fit_null_delta, FitOptions, FitResult};
use sdpd::montecarlo::{simulate_panel, McConfig};

fn show(label: &str, fit: &FitResult) {
    let (t, b) = (&fit.theta, &fit.theta_bc);
    println!("{label} (loglik {:.4}, {} iterations)", fit.loglik, fit.iterations);
    println!("  {:<8} {:>10} {:>12}", "", "estimate", "corrected");
    for (name, x, y) in [
        ("lambda", t.lambda, b.lambda),
        ("gamma", t.gamma, b.gamma),
        ("rho", t.rho, b.rho),
        ("beta", t.beta[0], b.beta[0]),
        ("delta", t.delta[0], b.delta[0]),
        ("kappa", t.kappa[(0, 0)], b.kappa[(0, 0)]),
        ("Gamma", t.gamma_x[(0, 0)], b.gamma_x[(0, 0)]),
        ("sigma2", t.sigma_xi2, b.sigma_xi2),
        ("Sigma_e", t.sigma_eps[(0, 0)], b.sigma_eps[(0, 0)]),
    ] {
        println!("  {name:<8} {x:>10.4} {y:>12.4}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = McConfig {
        n: 49,
        periods: 10,
        lambda0: 0.3,
        gamma0: 0.2,
        rho0: 0.1,
        delta0: 0.2,
        seed: 11,
        ..McConfig::default()
    };
    println!(
        "true values: lambda {} gamma {} rho {} beta 1 delta {} kappa 0.2 Gamma 0.3 sigma2 {:.2} Sigma_e 1",
        cfg.lambda0,
        cfg.gamma0,
        cfg.rho0,
        cfg.delta0,
        1.0 - cfg.delta0 * cfg.delta0
    );
    let sim = simulate_panel(&cfg, 0)?;
    let opts = FitOptions::default();
    show("joint null", &fit_joint_null(&sim.data)?);
    show("delta null", &fit_null_delta(&sim.data, &sim.seq, &opts)?);
    show("unrestricted", &fit_full(&sim.data, &sim.seq, &opts)?);
    Ok(())
}
