//! Writes one simulated panel (and its weight matrices) in the CLI's file formats.
//!
//! cargo run --example simulate_panel -- <out-dir> [n] [T] [delta0] [seed]

use std::path::PathBuf;

use sdpd::io::{write_panel_csv, write_weight_sequence};
use sdpd::montecarlo::{simulate_panel, McConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(args.first().map(String::as_str).unwrap_or("sim"));
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let cfg = McConfig {
        n: arg(1, "49").parse()?,
        periods: arg(2, "10").parse()?,
        delta0: arg(3, "0").parse()?,
        seed: arg(4, "1").parse()?,
        ..McConfig::default()
    };
    let sim = simulate_panel(&cfg, 0)?;
    std::fs::create_dir_all(&dir)?;
    write_panel_csv(&sim.data, &dir.join("panel.csv"))?;
    write_weight_sequence(&sim.seq, &dir.join("weights"))?;
    println!("wrote {}/panel.csv and {}/weights/index.csv", dir.display(), dir.display());
    Ok(())
}
