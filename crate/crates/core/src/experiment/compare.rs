use std::path::Path;

use serde::Serialize;

use super::ExperimentError;
use crate::io::IoError;

/// A `report.csv` read back as numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ParsedReport {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| ExperimentError::SchemaMismatch("empty report".into()))?
            .split(',')
            .map(str::to_owned)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, line)| {
                let row: Vec<f64> = line
                    .split(',')
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| ExperimentError::SchemaMismatch(format!("row {}: {e}", i + 1)))?;
                if row.len() != header.len() {
                    return Err(ExperimentError::SchemaMismatch(format!(
                        "row {} has {} columns, header has {}",
                        i + 1,
                        row.len(),
                        header.len()
                    )));
                }
                Ok(row)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, metric: &str) -> Result<Vec<f64>, ExperimentError> {
        let idx = self
            .header
            .iter()
            .position(|h| h == metric)
            .ok_or_else(|| ExperimentError::SchemaMismatch(format!("no column {metric:?}")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dominance {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub higher_is_better: bool,
    pub frames_compared: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a - mean_b` over the paired frames.
    pub delta: f64,
    pub a_better_frames: usize,
    pub b_better_frames: usize,
    pub dominant: Dominance,
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

/// Only overlap-style metrics improve upwards.
fn higher_is_better(metric: &str) -> bool {
    metric == "iou"
}

/// Paired per-frame comparison of one metric, optionally over the last
/// `last` frames only. Frames where either value is NaN are skipped.
pub fn compare_reports(
    a: &ParsedReport,
    b: &ParsedReport,
    metric: &str,
    last: Option<usize>,
) -> Result<Comparison, ExperimentError> {
    if a.header != b.header {
        return Err(ExperimentError::SchemaMismatch(
            "report headers differ".into(),
        ));
    }
    if a.rows.len() != b.rows.len() {
        return Err(ExperimentError::SchemaMismatch(format!(
            "reports have {} and {} frames",
            a.rows.len(),
            b.rows.len()
        )));
    }
    let (ca, cb) = (a.column(metric)?, b.column(metric)?);
    let start = last.map_or(0, |w| ca.len().saturating_sub(w));
    let up = higher_is_better(metric);
    let (mut sa, mut sb, mut n, mut wa, mut wb) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for (x, y) in ca[start..].iter().zip(&cb[start..]) {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        sa += x;
        sb += y;
        n += 1;
        let a_better = if up { x > y } else { x < y };
        let b_better = if up { y > x } else { y < x };
        wa += a_better as usize;
        wb += b_better as usize;
    }
    let (mean_a, mean_b) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (sa / n as f64, sb / n as f64)
    };
    let delta = if n == 0 { 0.0 } else { mean_a - mean_b };
    let dominant = if n == 0 || mean_a == mean_b {
        Dominance::Tie
    } else if (mean_a > mean_b) == up {
        Dominance::A
    } else {
        Dominance::B
    };
    Ok(Comparison {
        metric: metric.to_owned(),
        higher_is_better: up,
        frames_compared: n,
        mean_a,
        mean_b,
        delta,
        a_better_frames: wa,
        b_better_frames: wb,
        dominant,
    })
}

pub fn compare_runs(
    a: &Path,
    b: &Path,
    metric: &str,
    last: Option<usize>,
) -> Result<Comparison, ExperimentError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|source| {
            ExperimentError::Io(IoError::Io {
                path: p.display().to_string(),
                source,
            })
        })
    };
    let ra = ParsedReport::parse(&read(a)?)?;
    let rb = ParsedReport::parse(&read(b)?)?;
    compare_reports(&ra, &rb, metric, last)
}
