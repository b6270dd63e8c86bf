//! Per-epoch run metrics and their CSV form.
//!
//! Train rows go to `metrics.csv` (one row per epoch) and evaluation rows to
//! `eval.csv`; both share the same columns. Floats use Rust's shortest
//! round-trip format, `.` decimal separator, LF line endings.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "epoch,phase,mean_reward,std_reward,loss,kl,mean_sigma_trace,smart_invocations,wall_ms";

/// Numeric learning metrics, in column order, as exposed to plotting.
pub const PLOT_METRICS: [&str; 5] = ["mean_reward", "std_reward", "loss", "kl", "mean_sigma_trace"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Train,
    Eval,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Eval => "eval",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "eval" => Ok(Phase::Eval),
            other => Err(Error::InvalidArgument(format!("unknown phase '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub loss: f64,
    pub kl: f64,
    pub mean_sigma_trace: f64,
    pub smart_invocations: u64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.mean_reward,
            self.std_reward,
            self.loss,
            self.kl,
            self.mean_sigma_trace,
            self.smart_invocations,
            self.wall_ms
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if f.len() != 9 {
            return Err(Error::InvalidArgument(format!("expected 9 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>().map_err(|e| Error::InvalidArgument(format!("field {}: '{}': {e}", i + 1, f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse::<u64>().map_err(|e| Error::InvalidArgument(format!("field {}: '{}': {e}", i + 1, f[i])))
        };
        Ok(Self {
            epoch: int(0)? as usize,
            phase: f[1].parse()?,
            mean_reward: num(2)?,
            std_reward: num(3)?,
            loss: num(4)?,
            kl: num(5)?,
            mean_sigma_trace: num(6)?,
            smart_invocations: int(7)?,
            wall_ms: int(8)?,
        })
    }

    /// Value of one of [`PLOT_METRICS`].
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "mean_reward" => Some(self.mean_reward),
            "std_reward" => Some(self.std_reward),
            "loss" => Some(self.loss),
            "kl" => Some(self.kl),
            "mean_sigma_trace" => Some(self.mean_sigma_trace),
            _ => None,
        }
    }
}

/// Receives metrics rows as training progresses.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

/// Writes train rows to `<dir>/metrics.csv` and eval rows to `<dir>/eval.csv`,
/// flushing after every row so an interrupted run leaves valid files.
pub struct CsvMetricsSink {
    train: BufWriter<File>,
    eval: BufWriter<File>,
    dir: PathBuf,
}

impl CsvMetricsSink {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let open = |name: &str| -> io::Result<BufWriter<File>> {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            writeln!(w, "{METRICS_HEADER}")?;
            w.flush()?;
            Ok(w)
        };
        Ok(Self { train: open("metrics.csv")?, eval: open("eval.csv")?, dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl MetricsSink for CsvMetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        let w = match row.phase {
            Phase::Train => &mut self.train,
            Phase::Eval => &mut self.eval,
        };
        writeln!(w, "{}", row.to_csv_line())?;
        w.flush()?;
        Ok(())
    }
}

/// Reads a metrics file written by [`CsvMetricsSink`]. Errors name the line.
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == METRICS_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "{}:1: expected header '{METRICS_HEADER}', got '{}'",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            MetricsRow::parse_csv_line(l)
                .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 2)))
        })
        .collect()
}
