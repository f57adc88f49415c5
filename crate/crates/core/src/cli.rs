//! Command-line driver: weights, test, estimate and simulate subcommands.
//!
//! Every flag may also come from a JSON config (`--config`); flags win. Outputs go to
//! `--out <dir>` together with a `manifest.json`, or to stdout when `--out` is absent.
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::{fit_full, fit_joint_null, fit_null_delta, FitOptions, FitResult, Restriction};
use crate::io::{read_matrix_csv, read_panel_csv, read_weight_index, write_weight_sequence};
use crate::montecarlo::{parse_range, run_grid, timing_report, write_results_csv, GridSpec, McConfig, McResult, Sweep};
use crate::panel::PanelData;
use crate::score_tests::{chi2_critical, run_test, TestName, TestReport};
use crate::weights::{build_weight_sequence, grid_contiguity, Contiguity, Normalization, WeightSequence};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sdpd", version, about = "Score tests for endogenous spatial weights in dynamic panels")]
struct Cli {
    /// Worker threads for simulations (overrides SDPD_THREADS).
    #[arg(long, global = true, env = "SDPD_THREADS")]
    threads: Option<usize>,
    /// JSON config (or a previous manifest.json); command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build per-period weight matrices from a contiguity pattern and driver values.
    Weights(WeightsArgs),
    /// Run the score tests for endogeneity of the weights.
    Test(TestArgs),
    /// Fit the model under a restriction and report the bias-corrected estimate.
    Estimate(EstimateArgs),
    /// Run Monte Carlo size, power or timing experiments.
    Simulate(SimulateArgs),
}

/// How a command obtains its weight sequence.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct WeightSource {
    /// Index CSV (period,file) of precomputed weight matrices.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Lattice contiguity used with the panel's z_* drivers.
    #[arg(long)]
    scheme: Option<Contiguity>,
    /// Dense contiguity CSV used with the panel's z_* drivers.
    #[arg(long)]
    contiguity: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct WeightsArgs {
    #[arg(long)]
    scheme: Option<Contiguity>,
    #[arg(long)]
    contiguity: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Long CSV with unit,time,z_* columns for times 0..T.
    #[arg(long)]
    drivers: Option<PathBuf>,
    /// Skip row normalization.
    #[arg(long)]
    raw: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct TestArgs {
    #[arg(long)]
    panel: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    source: WeightSource,
    /// Comma-separated subset of rs, rs_robust, clm.
    #[arg(long, value_delimiter = ',')]
    tests: Option<Vec<TestName>>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct EstimateArgs {
    #[arg(long)]
    panel: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    source: WeightSource,
    /// joint-null, delta-null or none.
    #[arg(long)]
    restrict: Option<Restriction>,
    /// Five extra perturbed starting points.
    #[arg(long)]
    multistart: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct SimulateArgs {
    /// Preset layout: 2 (size), 3 (timing), 4 or 5 (power).
    #[arg(long)]
    table: Option<u8>,
    /// Number of units (a perfect square).
    #[arg(long)]
    n: Option<usize>,
    /// Number of periods.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    periods: Option<usize>,
    /// Replications per cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed; replication r uses stream r.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated contiguity schemes (queen, rook).
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<Contiguity>>,
    /// A, or A:B:C for A to C in steps of B.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    /// per-axis or cartesian combination of the parameter ranges.
    #[arg(long)]
    sweep: Option<Sweep>,
    /// Comma-separated subset of rs, rs_robust, clm.
    #[arg(long, value_delimiter = ',')]
    tests: Option<Vec<TestName>>,
    /// Nominal test level.
    #[arg(long)]
    level: Option<f64>,
    /// Output directory (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_seconds: f64,
    pub inputs: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Overlays the flags that were given on top of the config file.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: &Value) -> Result<T> {
    let mut base = match config {
        Value::Object(m) => m.clone(),
        Value::Null => serde_json::Map::new(),
        _ => return Err(Error::InvalidInput("config must be a JSON object".into())),
    };
    let given = serde_json::to_value(flags).map_err(|e| Error::InvalidInput(e.to_string()))?;
    if let Value::Object(m) = given {
        for (k, v) in m {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Error::InvalidInput(format!("config: {e}")))
}

fn load_config(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Null);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    // a manifest carries the effective config of the run it describes
    match v.get("config") {
        Some(inner) if v.get("config_hash").is_some() => Ok(inner.clone()),
        _ => Ok(v),
    }
}

struct Output {
    dir: Option<PathBuf>,
    manifest: RunManifest,
    start: Instant,
}

impl Output {
    fn new<T: Serialize>(command: &str, dir: Option<PathBuf>, config: &T, seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let config = strip_nulls(config);
        let config_hash = sha256_hex(config.to_string().as_bytes());
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::InvalidInput(format!("{}: {e}", d.display())))?;
        }
        Ok(Self {
            dir,
            manifest: RunManifest {
                command: command.into(),
                config,
                config_hash,
                seed,
                version: env!("CARGO_PKG_VERSION").into(),
                wall_time_seconds: 0.0,
                inputs: BTreeMap::new(),
            },
            start: Instant::now(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Writes `name` into the output directory, or prints it when there is none.
    fn emit(&self, name: &str, bytes: &[u8]) -> Result<()> {
        match &self.dir {
            Some(d) => {
                let p = d.join(name);
                std::fs::write(&p, bytes).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))
            }
            None => {
                print!("{}", String::from_utf8_lossy(bytes));
                Ok(())
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_time_seconds = self.start.elapsed().as_secs_f64();
        if let Some(d) = &self.dir {
            let p = d.join("manifest.json");
            let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
            std::fs::write(&p, text).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .collect(),
        ),
        other => other,
    }
}

fn require<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::InvalidInput(format!("--{name} is required")))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Long CSV with unit,time,z_* columns for times 0..T.
fn read_drivers(path: &Path) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let err = |m: String| Error::InvalidInput(format!("{}: {m}", path.display()));
    let f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let ui = header.iter().position(|h| h == "unit");
    let ti = header.iter().position(|h| h == "time");
    let zc: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("z_")).collect();
    let (Some(ui), Some(ti)) = (ui, ti) else {
        return Err(err("header must contain unit and time".into()));
    };
    if zc.is_empty() {
        return Err(err("need at least one z_* column".into()));
    }
    let mut units: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let unit = rec.get(ui).unwrap_or("").to_string();
        let u = match units.iter().position(|x| *x == unit) {
            Some(u) => u,
            None => {
                units.push(unit);
                units.len() - 1
            }
        };
        let t: usize = rec
            .get(ti)
            .unwrap_or("")
            .parse()
            .map_err(|_| err("time must be a nonnegative integer".into()))?;
        let vals = zc
            .iter()
            .map(|&c| {
                rec.get(c)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|_| err(format!("non-numeric driver at unit {u}, time {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        cells.insert((u, t), vals);
    }
    let n = units.len();
    let periods = cells.keys().map(|k| k.1).max().unwrap_or(0);
    let block = |t: usize| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(n, zc.len());
        for u in 0..n {
            let row = cells
                .get(&(u, t))
                .ok_or_else(|| err(format!("missing drivers for unit '{}' at time {t}", units[u])))?;
            for (j, v) in row.iter().enumerate() {
                m[(u, j)] = *v;
            }
        }
        Ok(m)
    };
    if n == 0 || periods == 0 {
        return Err(err("need drivers for times 0..T with T >= 1".into()));
    }
    Ok((block(0)?, (1..=periods).map(block).collect::<Result<_>>()?))
}

fn contiguity_mask(scheme: Option<Contiguity>, file: Option<&PathBuf>, n: usize, out: &mut Output) -> Result<DMatrix<f64>> {
    match (scheme, file) {
        (_, Some(p)) => {
            out.input(p)?;
            let m = read_matrix_csv(p, true)?;
            if m.nrows() != n {
                return Err(Error::Dimension(format!("contiguity is {0} x {0} but there are {n} units", m.nrows())));
            }
            Ok(m)
        }
        (Some(s), None) => grid_contiguity(n, s),
        (None, None) => Err(Error::InvalidInput("give --scheme or --contiguity".into())),
    }
}

fn weights_for(data: &PanelData, src: &WeightSource, out: &mut Output) -> Result<WeightSequence> {
    if let Some(idx) = &src.weights {
        let (seq, files) = read_weight_index(idx)?;
        out.input(idx)?;
        for f in &files {
            out.input(f)?;
        }
        return Ok(seq);
    }
    let wd = contiguity_mask(src.scheme, src.contiguity.as_ref(), data.n(), out)?;
    build_weight_sequence(data.z0(), data.z(), &wd, Normalization::Row)
}

fn cmd_weights(a: WeightsArgs, config: &Value) -> Result<()> {
    let a = merge(&a, config)?;
    let mut out = Output::new("weights", a.out.clone(), &a, None)?;
    let drivers = require(&a.drivers, "drivers")?;
    if let (Some(n), Some(s)) = (a.n, a.scheme) {
        grid_contiguity(n, s)?;
    }
    out.input(&drivers)?;
    let (z0, z) = read_drivers(&drivers)?;
    let n = a.n.unwrap_or(z0.nrows());
    if n != z0.nrows() {
        return Err(Error::Dimension(format!("--n {n} but the drivers file has {} units", z0.nrows())));
    }
    let wd = contiguity_mask(a.scheme, a.contiguity.as_ref(), n, &mut out)?;
    let norm = if a.raw.unwrap_or(false) {
        Normalization::None
    } else {
        Normalization::Row
    };
    let seq = build_weight_sequence(&z0, &z, &wd, norm)?;
    let dir = require(&a.out, "out")?;
    write_weight_sequence(&seq, &dir)?;
    eprintln!("wrote {} weight matrices of size {n} x {n} to {}", seq.periods() + 1, dir.display());
    out.finish()
}

fn cmd_test(a: TestArgs, config: &Value) -> Result<()> {
    let a = merge(&a, config)?;
    let mut out = Output::new("test", a.out.clone(), &a, None)?;
    let panel = require(&a.panel, "panel")?;
    out.input(&panel)?;
    let data = read_panel_csv(&panel)?.data;
    let seq = weights_for(&data, &a.source, &mut out)?;
    let level = a.level.unwrap_or(0.05);
    let tests = a.tests.clone().unwrap_or_else(|| TestName::ALL.to_vec());
    let opts = FitOptions::default();
    let crit = chi2_critical(level, data.dims().p);
    let mut reports: Vec<TestReport> = Vec::new();
    eprintln!("{:<10} {:>14} {:>10} {:>10}  decision at {level}", "test", "statistic", "critical", "p-value");
    for name in tests {
        let r = run_test(name, &data, &seq, &opts)?;
        let decision = if r.statistic > crit { "reject" } else { "do not reject" };
        eprintln!(
            "{:<10} {:>14.4} {:>10.4} {:>10.4}  {decision}",
            name.as_str(),
            r.statistic,
            crit,
            r.pvalue
        );
        reports.push(r.report());
    }
    out.emit("report.json", &json(&reports))?;
    out.finish()
}

fn cmd_estimate(a: EstimateArgs, config: &Value) -> Result<()> {
    let a = merge(&a, config)?;
    let mut out = Output::new("estimate", a.out.clone(), &a, a.seed)?;
    let panel = require(&a.panel, "panel")?;
    out.input(&panel)?;
    let data = read_panel_csv(&panel)?.data;
    let restrict = a.restrict.unwrap_or(Restriction::JointNull);
    let mut opts = FitOptions::default();
    if a.multistart.unwrap_or(false) {
        opts = opts.with_multistart(a.seed.unwrap_or(0));
    }
    let fit: FitResult = match restrict {
        Restriction::JointNull => fit_joint_null(&data)?,
        Restriction::DeltaNull => {
            if data.y0().is_none() {
                return Err(Error::MissingInitial("the delta-null fit needs Y_0 (time = 0 values of y)"));
            }
            let seq = weights_for(&data, &a.source, &mut out)?;
            fit_null_delta(&data, &seq, &opts)?
        }
        Restriction::None => {
            if data.y0().is_none() {
                return Err(Error::MissingInitial("the full fit needs Y_0 (time = 0 values of y)"));
            }
            let seq = weights_for(&data, &a.source, &mut out)?;
            fit_full(&data, &seq, &opts)?
        }
    };
    out.emit("fit.json", &json(&fit))?;
    out.finish()
}

fn values(spec: &Option<String>) -> Result<Vec<f64>> {
    match spec {
        Some(s) => parse_range(s),
        None => Ok(vec![0.0]),
    }
}

fn cmd_simulate(a: SimulateArgs, config: &Value) -> Result<()> {
    let a = merge(&a, config)?;
    let out = Output::new("simulate", a.out.clone(), &a, a.seed)?;
    let base = McConfig {
        n: a.n.unwrap_or(100),
        periods: a.periods.unwrap_or(10),
        reps: a.reps.unwrap_or(1000),
        seed: a.seed.unwrap_or(1),
        level: a.level.unwrap_or(0.05),
        tests: a.tests.clone().unwrap_or_else(|| vec![TestName::Rs, TestName::RsRobust]),
        ..McConfig::default()
    };
    base.validate()?;
    let schemes = a.schemes.clone().unwrap_or_else(|| vec![Contiguity::Queen, Contiguity::Rook]);
    let results: Vec<McResult> = match a.table {
        Some(2) => run_grid(&GridSpec { schemes, ..GridSpec::size_table(base) })?,
        Some(4) | Some(5) => run_grid(&GridSpec { schemes, ..GridSpec::power_table(base) })?,
        Some(3) => {
            let cfg = McConfig {
                tests: a.tests.clone().unwrap_or_else(|| vec![TestName::RsRobust, TestName::Clm]),
                ..base
            };
            schemes
                .iter()
                .map(|&scheme| timing_report(&McConfig { scheme, ..cfg.clone() }))
                .collect::<Result<_>>()?
        }
        Some(t) => return Err(Error::InvalidInput(format!("unknown table preset {t}; use 2, 3, 4 or 5"))),
        None => run_grid(&GridSpec {
            base,
            schemes,
            lambda: values(&a.lambda)?,
            gamma: values(&a.gamma)?,
            rho: values(&a.rho)?,
            delta: values(&a.delta)?,
            sweep: a.sweep.unwrap_or_default(),
        })?,
    };
    for r in &results {
        for s in &r.tests {
            if !s.is_valid() {
                eprintln!(
                    "warning: {} failed in {} of {} replications at (lambda0, gamma0, rho0, delta0) = ({}, {}, {}, {})",
                    s.test,
                    s.failures,
                    s.failures + s.completed,
                    r.config.lambda0,
                    r.config.gamma0,
                    r.config.rho0,
                    r.config.delta0
                );
            }
        }
    }
    let mut buf = Vec::new();
    write_results_csv(&results, &mut buf)?;
    out.emit("results.csv", &buf)?;
    out.finish()
}

fn init_threads(threads: Option<usize>) {
    if let Some(t) = threads.filter(|&t| t > 0) {
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    init_threads(cli.threads);
    let result = load_config(cli.config.as_deref()).and_then(|config| match cli.command {
        Command::Weights(a) => cmd_weights(a, &config),
        Command::Test(a) => cmd_test(a, &config),
        Command::Estimate(a) => cmd_estimate(a, &config),
        Command::Simulate(a) => cmd_simulate(a, &config),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let flags = SimulateArgs {
            n: Some(9),
            ..Default::default()
        };
        let config = serde_json::json!({"n": 49, "T": 5, "reps": 3});
        let m = merge(&flags, &config).unwrap();
        assert_eq!(m.n, Some(9));
        assert_eq!(m.periods, Some(5));
        assert_eq!(m.reps, Some(3));
    }

    #[test]
    fn manifest_config_is_unwrapped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, r#"{"config": {"n": 9}, "config_hash": "x"}"#).unwrap();
        assert_eq!(load_config(Some(&p)).unwrap(), serde_json::json!({"n": 9}));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Singular("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::NotPerfectSquare(10)), EXIT_INPUT);
        assert_eq!(run(["sdpd", "simulate", "--reps", "0"]), EXIT_INPUT);
        assert_eq!(run(["sdpd", "frobnicate"]), EXIT_INPUT);
    }
}
