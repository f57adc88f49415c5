//! Size or power of the score tests in one simulation cell.
//!
//! cargo run --release --example monte_carlo_cell -- [n] [T] [reps] [lambda0] [delta0]

use sdpd::montecarlo::{run_cell, McConfig};
use sdpd::score_tests::TestName;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let cfg = McConfig {
        n: arg(0, "49").parse()?,
        periods: arg(1, "10").parse()?,
        reps: arg(2, "200").parse()?,
        lambda0: arg(3, "0").parse()?,
        delta0: arg(4, "0").parse()?,
        tests: TestName::ALL.to_vec(),
        seed: 7,
        ..McConfig::default()
    };
    let res = run_cell(&cfg)?;
    println!("(n, T) = ({}, {}), lambda0 = {}, delta0 = {}", cfg.n, cfg.periods, cfg.lambda0, cfg.delta0);
    for s in &res.tests {
        println!(
            "{:<10} reject {:.3} (se {:.3})  mean stat {:.3}  median time {:.4}s  failures {}",
            s.test.as_str(),
            s.rejection_rate,
            s.mc_standard_error,
            s.mean_statistic,
            s.elapsed_median,
            s.failures
        );
    }
    Ok(())
}
