//! Concentrated log-likelihood, analytic score and bias vectors, checked against
//! finite differences and the dense reference implementation.
//!
//! cargo run --example likelihood_and_score

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdpd::likelihood::Likelihood;
use sdpd::oracle::{dense_check, fd_gradient, random_instance, random_theta};
use sdpd::panel::{Dims, ParamVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = Dims::new(1, 1, 1);
    let (data, seq) = random_instance(6, 4, dims, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = random_theta(dims, &mut rng);
    let lik = Likelihood::new(&data, &seq)?;

    println!("ln L = {:.8}", lik.loglik(&theta)?);
    let score = lik.score(&theta)?;
    let fd = fd_gradient(
        |x| {
            let t = ParamVector::unpack(x, dims)?;
            Ok(lik.loglik(&t)? / lik.nt())
        },
        &theta.pack(),
        1e-6,
    )?;
    println!("{:>4} {:>14} {:>14}", "k", "analytic", "central FD");
    for k in 0..score.len() {
        println!("{k:>4} {:>14.8} {:>14.8}", score[k], fd[k]);
    }

    let (d1, d2) = lik.bias_terms(&theta)?;
    let fmt = |v: &nalgebra::DVector<f64>| v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(", ");
    println!("Delta_1 = [{}]", fmt(&d1));
    println!("Delta_2 = [{}]", fmt(&d2));

    let report = dense_check(&data, &seq, &theta)?;
    println!("largest blockwise-vs-dense discrepancy: {:.2e}", report.max());
    Ok(())
}
