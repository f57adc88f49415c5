//! Standard RS, robust RS and conditional LM tests on simulated panels, with the
//! robustness matrix K and the asymptotic noncentrality parameters.
//!
//! cargo run --release --example score_tests

use nalgebra::DVector;
use sdpd::estimation::{fit_joint_null, FitOptions};
use sdpd::likelihood::Likelihood;
use sdpd::montecarlo::{simulate_panel, McConfig};
use sdpd::score_tests::{chi2_critical, clm, noncentrality, partial_blocks, rs_robust, rs_standard};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("critical values at 5%: p=1 {:.4}, p=2 {:.4}", chi2_critical(0.05, 1), chi2_critical(0.05, 2));
    for (label, lambda0, delta0) in [("null", 0.0, 0.0), ("lambda0 = 0.3", 0.3, 0.0), ("delta0 = 0.2", 0.0, 0.2)] {
        let cfg = McConfig {
            n: 100,
            periods: 10,
            lambda0,
            delta0,
            seed: 5,
            ..McConfig::default()
        };
        let sim = simulate_panel(&cfg, 0)?;
        let rs = rs_standard(&sim.data, &sim.seq)?;
        let (robust, k) = rs_robust(&sim.data, &sim.seq)?;
        let lm = clm(&sim.data, &sim.seq, &FitOptions::default())?;
        println!("{label}:");
        for r in [&rs, &robust, &lm] {
            println!(
                "  {:<10} stat {:>9.4}  p {:.4}  reject {}  ({:.1} ms)",
                r.name.as_str(),
                r.statistic,
                r.pvalue,
                r.rejects(0.05),
                1e3 * r.elapsed_seconds
            );
        }
        println!("  K = [{}]", k.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "));
    }

    // noncentrality of both RS tests for delta = 3/sqrt(nT), eta = 0 and eta = (2,0,0)/sqrt(nT)
    let sim = simulate_panel(&McConfig { n: 100, periods: 10, ..McConfig::default() }, 1)?;
    let fit = fit_joint_null(&sim.data)?;
    let lik = Likelihood::new(&sim.data, &sim.seq)?;
    let blocks = partial_blocks(&lik, &lik.information_plugin(&fit.theta_bc)?)?;
    let zeta = DVector::from_element(1, 3.0);
    for nu in [DVector::zeros(3), DVector::from_vec(vec![2.0, 0.0, 0.0])] {
        let (phi1, phi2) = noncentrality(&zeta, &nu, &blocks)?;
        println!("nu = {:?}: phi_1 (RS) = {phi1:.4}, phi_2 (robust RS) = {phi2:.4}", nu.as_slice());
    }
    Ok(())
}
