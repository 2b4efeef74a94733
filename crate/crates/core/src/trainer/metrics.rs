use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ElboBreakdown;
use crate::error::{Error, Result};

/// Tab-separated header of the metrics log.
pub const METRICS_HEADER: &str =
    "iteration\tK_max\tlearning_rate\tL_w_bits\tL_z_bits\tL_x_bits\telbo_bits\twall_time_s";

/// One logged row: averages over the iterations since the previous row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub k_max: usize,
    pub learning_rate: f64,
    pub l_w: f64,
    pub l_z: f64,
    pub l_x: f64,
    pub elbo: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:.3}",
            self.iteration,
            self.k_max,
            self.learning_rate,
            self.l_w,
            self.l_z,
            self.l_x,
            self.elbo,
            self.wall_time_s
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return None;
        }
        Some(Self {
            iteration: f[0].parse().ok()?,
            k_max: f[1].parse().ok()?,
            learning_rate: f[2].parse().ok()?,
            l_w: f[3].parse().ok()?,
            l_z: f[4].parse().ok()?,
            l_x: f[5].parse().ok()?,
            elbo: f[6].parse().ok()?,
            wall_time_s: f[7].parse().ok()?,
        })
    }
}

/// Running sums between two logged rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub(super) struct MetricWindow {
    count: usize,
    l_w: f64,
    l_z: f64,
    l_x: f64,
}

impl MetricWindow {
    pub fn push(&mut self, b: &ElboBreakdown) {
        self.count += 1;
        self.l_w += b.l_w;
        self.l_z += b.l_z;
        self.l_x += b.l_x;
    }

    /// Averages and resets.
    pub fn take(&mut self) -> Option<ElboBreakdown> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let out = ElboBreakdown::from_bits(self.l_w / n, self.l_z / n, self.l_x / n);
        *self = Self::default();
        Some(out)
    }
}

/// Reads a metrics log, skipping the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            MetricsRow::parse(l)
                .ok_or_else(|| Error::Config(format!("{}: bad metrics row {l:?}", path.display())))
        })
        .collect()
}

/// Rewrites the log keeping only rows up to `iteration` (used when training
/// rolls back to a checkpoint); creates the file with a header if absent.
pub(super) fn truncate_after(path: &Path, iteration: usize) -> Result<()> {
    let rows = if path.exists() {
        read_metrics(path)?
    } else {
        Vec::new()
    };
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows.iter().filter(|r| r.iteration <= iteration) {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(super) fn append(path: &Path, row: &MetricsRow) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row.to_line()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trip() {
        let r = MetricsRow {
            iteration: 300,
            k_max: 4,
            learning_rate: 2.5e-5,
            l_w: 12.25,
            l_z: 3.0,
            l_x: -40.5,
            elbo: -25.25,
            wall_time_s: 1.5,
        };
        assert_eq!(MetricsRow::parse(&r.to_line()), Some(r));
        assert_eq!(METRICS_HEADER.split('\t').count(), 8);
    }

    #[test]
    fn window_averages_and_resets() {
        let mut w = MetricWindow::default();
        assert!(w.take().is_none());
        w.push(&ElboBreakdown::from_bits(1.0, 2.0, 3.0));
        w.push(&ElboBreakdown::from_bits(3.0, 2.0, 1.0));
        let b = w.take().unwrap();
        assert_eq!(b, ElboBreakdown::from_bits(2.0, 2.0, 2.0));
        assert!(w.take().is_none());
    }
}
