//! Simulation design and the Monte Carlo runner for size, power and timing experiments.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FitOptions;
use crate::panel::PanelData;
use crate::score_tests::{chi2_critical, run_test, TestName};
use crate::weights::{build_weight_sequence, grid_contiguity, Contiguity, Normalization, WeightSequence};

pub const BETA0: f64 = 1.0;
pub const KAPPA0: f64 = 0.2;
pub const GAMMA_X0: f64 = 0.3;
/// Correlation between the regressors and the variates the fixed effects are averaged from.
pub const EFFECT_CORRELATION: f64 = 0.5;

/// One Monte Carlo cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub periods: usize,
    pub reps: usize,
    pub scheme: Contiguity,
    pub lambda0: f64,
    pub gamma0: f64,
    pub rho0: f64,
    pub delta0: f64,
    pub level: f64,
    pub seed: u64,
    pub tests: Vec<TestName>,
    /// Diagnostic toggle: include the two-way fixed effects.
    pub effects: bool,
    /// Diagnostic toggle: include the disturbances.
    pub noise: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n: 49,
            periods: 10,
            reps: 100,
            scheme: Contiguity::Queen,
            lambda0: 0.0,
            gamma0: 0.0,
            rho0: 0.0,
            delta0: 0.0,
            level: 0.05,
            seed: 1,
            tests: vec![TestName::Rs, TestName::RsRobust],
            effects: true,
            noise: true,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        let side = (self.n as f64).sqrt().round() as usize;
        if side * side != self.n || side < 2 {
            return Err(Error::NotPerfectSquare(self.n));
        }
        if self.periods < 2 {
            return Err(Error::InvalidInput(format!("need T >= 2, got {}", self.periods)));
        }
        if self.reps == 0 {
            return Err(Error::InvalidInput("reps must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidInput(format!("level {} outside (0, 1)", self.level)));
        }
        if self.lambda0.abs() + self.gamma0.abs() + self.rho0.abs() >= 1.0 {
            return Err(Error::Unstable {
                lambda: self.lambda0,
                gamma: self.gamma0,
                rho: self.rho0,
            });
        }
        if self.delta0.abs() >= 1.0 {
            return Err(Error::InvalidInput(format!("|delta0| = {} must be below 1", self.delta0)));
        }
        Ok(())
    }
}

/// One simulated replication together with its disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub data: PanelData,
    pub seq: WeightSequence,
    /// Outcome disturbances v, n x T.
    pub v: DMatrix<f64>,
    /// Driver disturbances epsilon, n x T.
    pub eps: DMatrix<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// (c, alpha) averaged from a variate correlated with `x` (n x T).
fn fixed_effects(rng: &mut ChaCha8Rng, x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let r = EFFECT_CORRELATION;
    let noise = normal_matrix(rng, x.nrows(), x.ncols());
    let aux = x * r + noise * (1.0 - r * r).sqrt();
    let unit = DVector::from_iterator(x.nrows(), aux.row_iter().map(|row| row.mean()));
    let time = DVector::from_iterator(x.ncols(), aux.column_iter().map(|col| col.mean()));
    (unit, time)
}

/// Draws one replication: deterministic in (cfg.seed, rep).
pub fn simulate_panel(cfg: &McConfig, rep: u64) -> Result<SimulatedPanel> {
    cfg.validate()?;
    let (n, t) = (cfg.n, cfg.periods);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep);

    let y0 = normal_matrix(&mut rng, n, 1).column(0).into_owned();
    let z0 = normal_matrix(&mut rng, n, 1);
    let x1 = normal_matrix(&mut rng, n, t);
    let x2 = normal_matrix(&mut rng, n, t);
    let (c1, a1) = fixed_effects(&mut rng, &x1);
    let (c2, a2) = fixed_effects(&mut rng, &x2);
    let e1 = normal_matrix(&mut rng, n, t);
    let e2 = normal_matrix(&mut rng, n, t);
    let (eps, v) = if cfg.noise {
        let v = &e1 * cfg.delta0 + &e2 * (1.0 - cfg.delta0 * cfg.delta0).sqrt();
        (e1, v)
    } else {
        (DMatrix::zeros(n, t), DMatrix::zeros(n, t))
    };
    let effects = if cfg.effects { 1.0 } else { 0.0 };

    let mut z = Vec::with_capacity(t);
    let mut prev = z0.column(0).into_owned();
    for s in 0..t {
        let zt = &prev * KAPPA0
            + x2.column(s) * GAMMA_X0
            + (&c2 + DVector::from_element(n, a2[s])) * effects
            + eps.column(s);
        z.push(DMatrix::from_column_slice(n, 1, zt.as_slice()));
        prev = zt;
    }
    let wd = grid_contiguity(n, cfg.scheme)?;
    let seq = build_weight_sequence(&z0, &z, &wd, Normalization::Row)?;

    let mut y = DMatrix::zeros(n, t);
    let mut ylag = y0.clone();
    for s in 0..t {
        let w_prev = seq.get(s).expect("initial weights built from Z_0");
        let w = seq.get(s + 1).expect("period in range");
        let rhs = w_prev * &ylag * cfg.rho0
            + &ylag * cfg.gamma0
            + x1.column(s) * BETA0
            + (&c1 + DVector::from_element(n, a1[s])) * effects
            + v.column(s);
        let a = DMatrix::identity(n, n) - w * cfg.lambda0;
        let ys = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("I - lambda W at period {}", s + 1)))?;
        y.set_column(s, &ys);
        ylag = ys;
    }
    let col = |m: &DMatrix<f64>, s: usize| DMatrix::from_column_slice(n, 1, m.column(s).as_slice());
    let data = PanelData::new(
        y,
        Some(y0),
        (0..t).map(|s| col(&x1, s)).collect(),
        (0..t).map(|s| col(&x2, s)).collect(),
        z,
        z0,
        None,
    )?;
    Ok(SimulatedPanel { data, seq, v, eps })
}

/// Per-test summary of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub test: TestName,
    pub rejection_rate: f64,
    pub mc_standard_error: f64,
    pub mean_statistic: f64,
    pub elapsed_mean: f64,
    pub elapsed_median: f64,
    /// Replications that produced a statistic.
    pub completed: usize,
    /// Replications excluded because estimation or testing failed.
    pub failures: usize,
    /// Statistics of the completed replications, in replication order.
    #[serde(skip)]
    pub statistics: Vec<f64>,
}

impl TestSummary {
    /// A cell is valid when fewer than 1% of replications failed.
    pub fn is_valid(&self) -> bool {
        (self.failures as f64) < 0.01 * (self.completed + self.failures) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config: McConfig,
    pub tests: Vec<TestSummary>,
    pub elapsed_s: f64,
}

impl McResult {
    pub fn get(&self, test: TestName) -> Option<&TestSummary> {
        self.tests.iter().find(|s| s.test == test)
    }
}

/// (statistic, elapsed) per requested test, or None on failure.
type RepOutcome = Vec<Option<(f64, f64)>>;

fn run_rep(cfg: &McConfig, rep: u64, opts: &FitOptions) -> RepOutcome {
    let Ok(sim) = simulate_panel(cfg, rep) else {
        return vec![None; cfg.tests.len()];
    };
    cfg.tests
        .iter()
        .map(|&name| {
            run_test(name, &sim.data, &sim.seq, opts)
                .ok()
                .map(|r| (r.statistic, r.elapsed_seconds))
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn summarize(cfg: &McConfig, outcomes: &[RepOutcome], elapsed: f64) -> McResult {
    let df = 1;
    let crit = chi2_critical(cfg.level, df);
    let tests = cfg
        .tests
        .iter()
        .enumerate()
        .map(|(k, &test)| {
            let done: Vec<(f64, f64)> = outcomes.iter().filter_map(|o| o[k]).collect();
            let completed = done.len();
            let statistics: Vec<f64> = done.iter().map(|d| d.0).collect();
            let rejections = statistics.iter().filter(|&&s| s > crit).count();
            let r = if completed > 0 {
                rejections as f64 / completed as f64
            } else {
                f64::NAN
            };
            let mut times: Vec<f64> = done.iter().map(|d| d.1).collect();
            TestSummary {
                test,
                rejection_rate: r,
                mc_standard_error: (r * (1.0 - r) / completed as f64).sqrt(),
                mean_statistic: statistics.iter().sum::<f64>() / completed as f64,
                elapsed_mean: times.iter().sum::<f64>() / completed as f64,
                elapsed_median: median(&mut times),
                completed,
                failures: outcomes.len() - completed,
                statistics,
            }
        })
        .collect();
    McResult {
        config: cfg.clone(),
        tests,
        elapsed_s: elapsed,
    }
}

/// Runs every replication of one cell concurrently; the summary does not depend on scheduling.
pub fn run_cell(cfg: &McConfig) -> Result<McResult> {
    cfg.validate()?;
    let start = Instant::now();
    let opts = FitOptions::default();
    let outcomes: Vec<RepOutcome> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|rep| run_rep(cfg, rep, &opts))
        .collect();
    Ok(summarize(cfg, &outcomes, start.elapsed().as_secs_f64()))
}

/// Same as [`run_cell`] but single-threaded, so per-test timings are comparable.
pub fn timing_report(cfg: &McConfig) -> Result<McResult> {
    cfg.validate()?;
    let start = Instant::now();
    let opts = FitOptions::default();
    let outcomes: Vec<RepOutcome> = (0..cfg.reps as u64).map(|rep| run_rep(cfg, rep, &opts)).collect();
    Ok(summarize(cfg, &outcomes, start.elapsed().as_secs_f64()))
}

/// Parses `A:B:C` (from A to C in steps of B) or a single value.
pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidInput(format!("invalid range '{spec}', expected A:B:C"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [v] => Ok(vec![*v]),
        [a, b, c] => {
            if !(*b > 0.0) || c < a || !a.is_finite() || !c.is_finite() {
                return Err(bad());
            }
            let steps = ((c - a) / b + 1e-9).floor() as usize;
            // round to the step's decimal grid so 0.1 + 0.05 prints as 0.15
            Ok((0..=steps).map(|k| ((a + k as f64 * b) * 1e12).round() / 1e12).collect())
        }
        _ => Err(bad()),
    }
}

/// How the eta axes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    /// One eta component nonzero at a time, as in the size and power tables.
    #[default]
    PerAxis,
    Cartesian,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-axis" => Ok(Sweep::PerAxis),
            "cartesian" => Ok(Sweep::Cartesian),
            other => Err(Error::InvalidInput(format!("unknown sweep '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: McConfig,
    pub schemes: Vec<Contiguity>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub sweep: Sweep,
}

impl GridSpec {
    /// Expands the grid into cells (scheme-major, then delta, then eta rows).
    pub fn cells(&self) -> Vec<McConfig> {
        let etas: Vec<[f64; 3]> = match self.sweep {
            Sweep::Cartesian => {
                let mut v = Vec::new();
                for &l in &self.lambda {
                    for &g in &self.gamma {
                        for &r in &self.rho {
                            v.push([l, g, r]);
                        }
                    }
                }
                v
            }
            Sweep::PerAxis => {
                let mut v: Vec<[f64; 3]> = Vec::new();
                let axes = [&self.lambda, &self.gamma, &self.rho];
                if axes.iter().any(|a| a.contains(&0.0)) || axes.iter().all(|a| a.is_empty()) {
                    if axes.iter().any(|a| !a.is_empty()) {
                        v.push([0.0; 3]);
                    }
                }
                for (i, axis) in axes.iter().enumerate() {
                    for &x in axis.iter().filter(|x| **x != 0.0) {
                        let mut e = [0.0; 3];
                        e[i] = x;
                        v.push(e);
                    }
                }
                v
            }
        };
        let mut cells = Vec::new();
        for &scheme in &self.schemes {
            for &d in &self.delta {
                for e in &etas {
                    cells.push(McConfig {
                        scheme,
                        lambda0: e[0],
                        gamma0: e[1],
                        rho0: e[2],
                        delta0: d,
                        ..self.base.clone()
                    });
                }
            }
        }
        cells
    }

    /// Size table layout: eta one component at a time over 0:0.05:0.3, delta0 = 0.
    pub fn size_table(base: McConfig) -> Self {
        let axis = parse_range("0:0.05:0.3").expect("static range");
        Self {
            base,
            schemes: vec![Contiguity::Queen, Contiguity::Rook],
            lambda: axis.clone(),
            gamma: axis.clone(),
            rho: axis,
            delta: vec![0.0],
            sweep: Sweep::PerAxis,
        }
    }

    /// Power table layout: the size-table rows for delta0 over 0.05:0.05:0.2.
    pub fn power_table(base: McConfig) -> Self {
        Self {
            delta: parse_range("0.05:0.05:0.2").expect("static range"),
            ..Self::size_table(base)
        }
    }
}

/// Runs every cell of a grid in order.
pub fn run_grid(grid: &GridSpec) -> Result<Vec<McResult>> {
    grid.cells().iter().map(run_cell).collect()
}

pub const CSV_HEADER: [&str; 13] = [
    "n", "T", "scheme", "lambda0", "gamma0", "rho0", "delta0", "test", "reps", "reject_rate", "mc_se", "mean_stat",
    "elapsed_s",
];

/// Shortest representation that parses back to the same f64.
pub fn fmt_num(x: f64) -> String {
    format!("{x}")
}

/// Long-format results table, one row per (cell, test).
pub fn write_results_csv<W: Write>(results: &[McResult], out: W) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidInput(format!("writing results: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for res in results {
        let c = &res.config;
        for s in &res.tests {
            w.write_record([
                c.n.to_string(),
                c.periods.to_string(),
                c.scheme.to_string(),
                fmt_num(c.lambda0),
                fmt_num(c.gamma0),
                fmt_num(c.rho0),
                fmt_num(c.delta0),
                s.test.to_string(),
                s.completed.to_string(),
                fmt_num(s.rejection_rate),
                fmt_num(s.mc_standard_error),
                fmt_num(s.mean_statistic),
                fmt_num(s.elapsed_mean),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing results: {e}")))?;
    Ok(())
}
