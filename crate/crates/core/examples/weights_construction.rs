//! Contiguity masks, the economic-distance kernel and a time-varying weight sequence.
//!
//! cargo run --example weights_construction

use nalgebra::DMatrix;
use sdpd::weights::{build_weight_sequence, grid_contiguity, spectral_guard, Contiguity, Normalization, Spectrum};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 9;
    for scheme in [Contiguity::Rook, Contiguity::Queen] {
        let wd = grid_contiguity(n, scheme)?;
        let degrees: Vec<f64> = wd.row_iter().map(|r| r.sum()).collect();
        println!("{scheme} 3x3 lattice, neighbour counts {degrees:?}");
    }

    // one driver per unit and period; W_t = rownorm(mask o 1/|z_i - z_j|)
    let periods = 3;
    let z0 = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.7).sin());
    let z: Vec<DMatrix<f64>> = (1..=periods)
        .map(|t| DMatrix::from_fn(n, 1, |i, _| ((i + 3 * t) as f64 * 0.7).sin()))
        .collect();
    let wd = grid_contiguity(n, Contiguity::Queen)?;
    let seq = build_weight_sequence(&z0, &z, &wd, Normalization::Row)?;
    println!("row normalized: {}, row-sum bound C_w = {}", seq.is_row_normalized(), seq.row_sum_bound());
    let row: Vec<String> = seq.get(1).unwrap().row(0).iter().map(|v| format!("{v:.4}")).collect();
    println!("W_1 row 0: [{}]", row.join(", "));

    let spectrum = Spectrum::new(&seq);
    for lambda in [0.0, 0.3, 0.6] {
        println!("lambda = {lambda}: sum_t ln|I - lambda W_t| = {:.6}", spectrum.log_det(lambda, &seq)?);
    }
    println!("stable at (0.3, 0.2, 0.1)? {}", spectral_guard([0.3, 0.2, 0.1], &seq));
    println!("stable at (0.6, 0.3, 0.2)? {}", spectral_guard([0.6, 0.3, 0.2], &seq));
    Ok(())
}
