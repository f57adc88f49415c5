//! Blockwise computations against explicit nT x nT assembly on small instances.
//!
//! cargo run --example dense_oracle

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdpd::oracle::{dense_check, random_instance, random_theta};
use sdpd::panel::Dims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:>3} {:>3} {:>10} {:>10} {:>10} {:>10} {:>10}", "n", "T", "log-det", "traces", "loglik", "score", "info");
    for (k, (n, t)) in [(2, 2), (3, 3), (4, 3), (5, 4), (8, 4), (16, 4)].into_iter().enumerate() {
        let dims = Dims::new(1, 1, 1);
        let (data, seq) = random_instance(n, t, dims, k as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut theta = random_theta(dims, &mut rng);
        theta.delta.fill(0.0);
        let r = dense_check(&data, &seq, &theta)?;
        println!(
            "{n:>3} {t:>3} {:>10.1e} {:>10.1e} {:>10.1e} {:>10.1e} {:>10.1e}",
            r.log_det, r.masked_traces, r.loglik, r.score, r.information
        );
    }
    Ok(())
}
