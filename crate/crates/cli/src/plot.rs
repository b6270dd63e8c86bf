//! Long-format plot tables merged from per-cell metrics files.
//!
//! `plot.csv` holds the train rows, `plot_eval.csv` the evaluation rows; both
//! have columns `mode,seed,epoch,metric,value` with one row per
//! `(cell, epoch, metric)` for every metric in [`PLOT_METRICS`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flowcem::metrics::{read_metrics_csv, PLOT_METRICS};
use flowcem::MetricsRow;

use crate::error::{CliError, Result};

pub const PLOT_HEADER: [&str; 5] = ["mode", "seed", "epoch", "metric", "value"];
pub const PLOT_FILE: &str = "plot.csv";
pub const PLOT_EVAL_FILE: &str = "plot_eval.csv";

/// `(mode, seed)` of a cell directory.
pub type CellKey = (String, u64);

/// `epoch -> metric -> value` for one cell.
pub type CellTable = BTreeMap<usize, BTreeMap<String, f64>>;

/// Splits a cell directory name `<mode>_<seed>`.
pub fn parse_cell_name(name: &str) -> Option<CellKey> {
    let (mode, seed) = name.rsplit_once('_')?;
    if mode.is_empty() {
        return None;
    }
    Some((mode.to_string(), seed.parse().ok()?))
}

/// Cell directories under `run_dir` (those containing `metrics.csv`), sorted
/// by mode name then numeric seed.
pub fn cell_dirs(run_dir: &Path) -> Result<Vec<(CellKey, PathBuf)>> {
    let rd = std::fs::read_dir(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    let mut cells = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| CliError::io(run_dir, e))?;
        let path = entry.path();
        if !path.join("metrics.csv").is_file() {
            continue;
        }
        if let Some(key) = entry.file_name().to_str().and_then(parse_cell_name) {
            cells.push((key, path));
        }
    }
    cells.sort();
    Ok(cells)
}

fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics_csv(path).map_err(|e| match e {
        flowcem::Error::Io(source) => CliError::io(path, source),
        other => CliError::Core(other),
    })
}

fn write_long(path: &Path, cells: &[(CellKey, Vec<MetricsRow>)]) -> Result<usize> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(PLOT_HEADER)?;
    let mut n = 0;
    for ((mode, seed), rows) in cells {
        for row in rows {
            for metric in PLOT_METRICS {
                let value = row.metric(metric).expect("plot metric");
                w.write_record([mode.as_str(), &seed.to_string(), &row.epoch.to_string(), metric, &value.to_string()])?;
                n += 1;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub train_path: PathBuf,
    pub eval_path: PathBuf,
    pub train_rows: usize,
    pub eval_rows: usize,
    pub cells: usize,
}

/// Merges every cell under `run_dir` into `plot.csv` and `plot_eval.csv`
/// inside `run_dir`.
pub fn plotdata(run_dir: &Path) -> Result<PlotOutput> {
    let cells = cell_dirs(run_dir)?;
    if cells.is_empty() {
        return Err(CliError::MissingPrerequisite {
            what: "metrics",
            path: run_dir.to_path_buf(),
            command: "train-rl",
        });
    }
    let mut train = Vec::with_capacity(cells.len());
    let mut eval = Vec::with_capacity(cells.len());
    for (key, dir) in &cells {
        train.push((key.clone(), read_rows(&dir.join("metrics.csv"))?));
        let eval_path = dir.join("eval.csv");
        let rows = if eval_path.is_file() { read_rows(&eval_path)? } else { Vec::new() };
        eval.push((key.clone(), rows));
    }
    let train_path = run_dir.join(PLOT_FILE);
    let eval_path = run_dir.join(PLOT_EVAL_FILE);
    let train_rows = write_long(&train_path, &train)?;
    let eval_rows = write_long(&eval_path, &eval)?;
    Ok(PlotOutput { train_path, eval_path, train_rows, eval_rows, cells: cells.len() })
}

/// Parses a long-format table back into per-cell tables.
pub fn read_long(path: &Path) -> Result<BTreeMap<CellKey, CellTable>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let bad = |line: usize, msg: String| CliError::Malformed { path: path.to_path_buf(), line, msg };
    if r.headers()?.iter().ne(PLOT_HEADER) {
        return Err(bad(1, format!("expected header {}", PLOT_HEADER.join(","))));
    }
    let mut out: BTreeMap<CellKey, CellTable> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != 5 {
            return Err(bad(line, format!("expected 5 fields, got {}", rec.len())));
        }
        let seed = rec[1].parse::<u64>().map_err(|e| bad(line, format!("seed '{}': {e}", &rec[1])))?;
        let epoch = rec[2].parse::<usize>().map_err(|e| bad(line, format!("epoch '{}': {e}", &rec[2])))?;
        let value = rec[4].parse::<f64>().map_err(|e| bad(line, format!("value '{}': {e}", &rec[4])))?;
        let metric = rec[3].to_string();
        if !PLOT_METRICS.contains(&metric.as_str()) {
            return Err(bad(line, format!("unknown metric '{metric}'")));
        }
        let slot = out.entry((rec[0].to_string(), seed)).or_default().entry(epoch).or_default();
        if slot.insert(metric.clone(), value).is_some() {
            return Err(bad(line, format!("duplicate {metric} for epoch {epoch}")));
        }
    }
    Ok(out)
}

/// The per-cell table [`read_long`] should reconstruct from `rows`.
pub fn table_of(rows: &[MetricsRow]) -> CellTable {
    rows.iter()
        .map(|r| (r.epoch, PLOT_METRICS.iter().map(|m| (m.to_string(), r.metric(m).expect("plot metric"))).collect()))
        .collect()
}
