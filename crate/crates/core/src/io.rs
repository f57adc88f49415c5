//! Panel and weight-matrix file formats.
//!
//! Panel CSV is long format with a header: `unit,time,y` followed by `x1_*`, `x2_*`
//! and `z_*` columns. Rows with `time = 0` carry the initial values (Y_0 may be left
//! empty, Z_0 is required); rows with `time = 1..T` carry the sample. Weight matrices
//! are dense headerless CSVs listed in an index file with columns `period,file`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::weights::WeightSequence;

fn input_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("{}: {msg}", path.display()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| input_err(path, e))
}

/// Formats a float so that it parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Unit labels in file order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelFile {
    pub data: PanelData,
    pub units: Vec<String>,
}

fn parse_cell(path: &Path, row: usize, col: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| input_err(path, format!("row {row}: column '{col}' has non-numeric value '{s}'")))
}

/// Reads a long-format panel CSV.
pub fn read_panel_csv(path: &Path) -> Result<PanelFile> {
    read_panel(open(path)?, path)
}

pub fn read_panel<R: Read>(reader: R, path: &Path) -> Result<PanelFile> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| input_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let (Some(ui), Some(ti), Some(yi)) = (find("unit"), find("time"), find("y")) else {
        return Err(input_err(path, "header must contain unit, time and y"));
    };
    let cols = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    };
    let (x1c, x2c, zc) = (cols("x1_"), cols("x2_"), cols("z_"));
    if x1c.is_empty() || zc.is_empty() {
        return Err(input_err(path, "need at least one x1_* and one z_* column"));
    }

    let mut units: Vec<String> = Vec::new();
    let mut unit_pos: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows: BTreeMap<(usize, usize), csv::StringRecord> = BTreeMap::new();
    let mut max_t = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        let line = r + 2;
        let unit = rec.get(ui).unwrap_or("").to_string();
        let t: usize = rec
            .get(ti)
            .unwrap_or("")
            .parse()
            .map_err(|_| input_err(path, format!("row {line}: time must be a nonnegative integer")))?;
        let next = units.len();
        let u = *unit_pos.entry(unit.clone()).or_insert_with(|| {
            units.push(unit);
            next
        });
        if rows.insert((u, t), rec).is_some() {
            return Err(input_err(path, format!("row {line}: duplicate (unit, time)")));
        }
        max_t = max_t.max(t);
    }
    let (n, periods) = (units.len(), max_t);
    if n == 0 || periods == 0 {
        return Err(input_err(path, "no sample rows"));
    }
    let get = |u: usize, t: usize| -> Result<&csv::StringRecord> {
        rows.get(&(u, t))
            .ok_or_else(|| input_err(path, format!("missing row for unit '{}' at time {t}", units[u])))
    };
    let block = |t: usize, idx: &[usize]| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(n, idx.len());
        for u in 0..n {
            let rec = get(u, t)?;
            for (j, &c) in idx.iter().enumerate() {
                m[(u, j)] = parse_cell(path, t, &header[c], rec.get(c).unwrap_or(""))?;
            }
        }
        Ok(m)
    };

    let mut y = DMatrix::zeros(n, periods);
    let mut x1 = Vec::with_capacity(periods);
    let mut x2 = Vec::with_capacity(periods);
    let mut z = Vec::with_capacity(periods);
    for t in 1..=periods {
        y.set_column(t - 1, &block(t, &[yi])?.column(0));
        x1.push(block(t, &x1c)?);
        x2.push(block(t, &x2c)?);
        z.push(block(t, &zc)?);
    }
    if (0..n).any(|u| !rows.contains_key(&(u, 0))) {
        return Err(input_err(path, "time = 0 rows with z_* values are required for every unit"));
    }
    let z0 = block(0, &zc)?;
    let y0_cells: Vec<&str> = (0..n).map(|u| rows[&(u, 0)].get(yi).unwrap_or("")).collect();
    let y0 = if y0_cells.iter().all(|s| s.is_empty() || s.eq_ignore_ascii_case("na")) {
        None
    } else {
        Some(DVector::from_iterator(
            n,
            y0_cells
                .iter()
                .map(|s| parse_cell(path, 0, "y", s))
                .collect::<Result<Vec<_>>>()?,
        ))
    };
    let data = PanelData::new(y, y0, x1, x2, z, z0, None)?;
    Ok(PanelFile { data, units })
}

/// Writes a panel in the long format read by [`read_panel_csv`].
pub fn write_panel<W: Write>(data: &PanelData, out: W) -> Result<()> {
    let d = data.dims();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit".to_string(), "time".into(), "y".into()];
    header.extend((1..=d.k1).map(|j| format!("x1_{j}")));
    header.extend((1..=d.k2).map(|j| format!("x2_{j}")));
    header.extend((1..=d.p).map(|j| format!("z_{j}")));
    let io = |e: csv::Error| Error::InvalidInput(format!("writing panel: {e}"));
    w.write_record(&header).map_err(io)?;
    for i in 0..data.n() {
        let mut rec = vec![(i + 1).to_string(), "0".into()];
        rec.push(data.y0().map(|v| fmt_f64(v[i])).unwrap_or_default());
        rec.extend(std::iter::repeat_n(String::new(), d.k1 + d.k2));
        rec.extend((0..d.p).map(|j| fmt_f64(data.z0()[(i, j)])));
        w.write_record(&rec).map_err(io)?;
    }
    for t in 0..data.periods() {
        for i in 0..data.n() {
            let mut rec = vec![(i + 1).to_string(), (t + 1).to_string(), fmt_f64(data.y()[(i, t)])];
            rec.extend((0..d.k1).map(|j| fmt_f64(data.x1()[t][(i, j)])));
            rec.extend((0..d.k2).map(|j| fmt_f64(data.x2()[t][(i, j)])));
            rec.extend((0..d.p).map(|j| fmt_f64(data.z()[t][(i, j)])));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing panel: {e}")))
}

pub fn write_panel_csv(data: &PanelData, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| input_err(path, e))?;
    write_panel(data, f)
}

/// Reads a dense headerless matrix; it must be square when `square` is set.
pub fn read_matrix_csv(path: &Path, square: bool) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, s)| parse_cell(path, r + 1, &format!("{}", c + 1), s))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(input_err(path, "matrix rows are empty or ragged"));
    }
    if square && nr != nc {
        return Err(input_err(path, format!("matrix is {nr} x {nc}, expected square")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| input_err(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))
            .map_err(|e| input_err(path, e))?;
    }
    w.flush().map_err(|e| input_err(path, e))
}

/// Writes `w_<t>.csv` for every available period plus `index.csv`; returns the written paths.
pub fn write_weight_sequence(seq: &WeightSequence, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| input_err(dir, e))?;
    let mut written = Vec::new();
    let index_path = dir.join("index.csv");
    let f = File::create(&index_path).map_err(|e| input_err(&index_path, e))?;
    let mut idx = csv::Writer::from_writer(f);
    idx.write_record(["period", "file"]).map_err(|e| input_err(&index_path, e))?;
    let first = if seq.initial().is_some() { 0 } else { 1 };
    for t in first..=seq.periods() {
        let w = seq.get(t).expect("period in range");
        let name = format!("w_{t}.csv");
        let path = dir.join(&name);
        write_matrix_csv(w, &path)?;
        idx.write_record([t.to_string(), name]).map_err(|e| input_err(&index_path, e))?;
        written.push(path);
    }
    idx.flush().map_err(|e| input_err(&index_path, e))?;
    written.push(index_path);
    Ok(written)
}

/// Reads an index file (`period,file`, paths relative to the index) into a sequence.
/// Period 0 is optional and becomes W_0.
pub fn read_weight_index(path: &Path) -> Result<(WeightSequence, Vec<PathBuf>)> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let mut entries: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        let t: usize = rec
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|_| input_err(path, "period must be a nonnegative integer"))?;
        let file = rec.get(1).ok_or_else(|| input_err(path, "missing file column"))?;
        entries.insert(t, base.join(file));
    }
    let periods = entries.keys().max().copied().unwrap_or(0);
    if periods == 0 || (1..=periods).any(|t| !entries.contains_key(&t)) {
        return Err(input_err(path, "index must list periods 1..T without gaps"));
    }
    let initial = entries.get(&0).map(|p| read_matrix_csv(p, true)).transpose()?;
    let mats = (1..=periods)
        .map(|t| read_matrix_csv(&entries[&t], true))
        .collect::<Result<Vec<_>>>()?;
    let files = entries.into_values().collect();
    Ok((WeightSequence::new(initial, mats)?, files))
}
