//! Per-iteration metric log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{DdclError, Result};

pub const METRIC_LOG_HEADER: &str =
    "epoch,iter,loss_total,loss_e,loss_p,loss_ci,mean_corr,violating_pairs,lr";

/// One training iteration. Loss columns are the weighted, signed
/// contributions to the total (so `loss_ci` is `-mu * L_CI`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub iter: u64,
    pub loss_total: f64,
    pub loss_e: f64,
    pub loss_p: f64,
    pub loss_ci: f64,
    pub mean_corr: f64,
    pub violating_pairs: usize,
    pub lr: f64,
}

impl MetricRow {
    fn write_csv_line(&self, out: &mut String) {
        // `{}` on f64 prints the shortest representation that round-trips
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            self.loss_total,
            self.loss_e,
            self.loss_p,
            self.loss_ci,
            self.mean_corr,
            self.violating_pairs,
            self.lr
        );
    }
}

pub fn metric_log_to_string(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRIC_LOG_HEADER);
    out.push('\n');
    for row in rows {
        row.write_csv_line(&mut out);
    }
    out
}

pub fn write_metric_log(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metric_log_to_string(rows)).map_err(|e| DdclError::io(path, e))
}

pub fn parse_metric_log(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRIC_LOG_HEADER => {}
        other => {
            return Err(DdclError::Parse {
                line: 1,
                message: format!("expected header {METRIC_LOG_HEADER:?}, got {other:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k as u64 + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(DdclError::Parse {
                line: line_no,
                message: format!("expected 9 columns, found {}", cells.len()),
            });
        }
        let bad = |col: &str| DdclError::Parse {
            line: line_no,
            message: format!("bad value in column {col}"),
        };
        let f = |i: usize, col: &str| cells[i].trim().parse::<f64>().map_err(|_| bad(col));
        rows.push(MetricRow {
            epoch: cells[0].trim().parse().map_err(|_| bad("epoch"))?,
            iter: cells[1].trim().parse().map_err(|_| bad("iter"))?,
            loss_total: f(2, "loss_total")?,
            loss_e: f(3, "loss_e")?,
            loss_p: f(4, "loss_p")?,
            loss_ci: f(5, "loss_ci")?,
            mean_corr: f(6, "mean_corr")?,
            violating_pairs: cells[7].trim().parse().map_err(|_| bad("violating_pairs"))?,
            lr: f(8, "lr")?,
        });
    }
    Ok(rows)
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DdclError::io(path, e))?;
    parse_metric_log(&text)
}
