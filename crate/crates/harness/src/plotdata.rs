//! Long-format plot data (`series,x,y,y_err`) from experiment curves.

use std::io::Write;
use std::path::{Path, PathBuf};

use asgd_core::fmt::real;
use serde::Deserialize;

use crate::experiment::CURVES;
use crate::{HarnessError, Result};

pub const METRICS: [&str; 4] = ["delta", "norm_dist", "gap_loss", "gap_misclass"];

#[derive(Clone, Debug, PartialEq)]
pub struct PlotRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub y_err: f64,
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    tau_bar: usize,
    c: f64,
    t: usize,
    delta_mean: f64,
    delta_se: f64,
    norm_dist_mean: f64,
    norm_dist_se: f64,
    gap_loss_mean: f64,
    gap_loss_se: f64,
    gap_misclass_mean: f64,
    gap_misclass_se: f64,
}

impl CurveRow {
    fn metric(&self, name: &str) -> (f64, f64) {
        match name {
            "delta" => (self.delta_mean, self.delta_se),
            "norm_dist" => (self.norm_dist_mean, self.norm_dist_se),
            "gap_loss" => (self.gap_loss_mean, self.gap_loss_se),
            "gap_misclass" => (self.gap_misclass_mean, self.gap_misclass_se),
            _ => unreachable!("metric names are checked up front"),
        }
    }
}

fn curves_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(CURVES)
    } else {
        input.to_path_buf()
    }
}

fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    if !path.exists() {
        return Err(HarnessError::Input(format!("missing input {}", path.display())));
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<CurveRow>, _>>()
        .map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))
}

/// One series per `(input, metric, sweep value)`. The sweep value is named
/// by whichever of `tau_bar` and `c` varies inside an input.
pub fn emit_plot_data(inputs: &[PathBuf], metrics: &[String]) -> Result<Vec<PlotRow>> {
    if inputs.is_empty() {
        return Err(HarnessError::Input("no inputs given".into()));
    }
    for m in metrics {
        if !METRICS.contains(&m.as_str()) {
            return Err(HarnessError::Input(format!(
                "unknown metric `{m}` (expected one of {})",
                METRICS.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    for input in inputs {
        let rows = read_curves(&curves_path(input))?;
        let mut taus: Vec<usize> = rows.iter().map(|r| r.tau_bar).collect();
        taus.sort_unstable();
        taus.dedup();
        let mut cs: Vec<u64> = rows.iter().map(|r| r.c.to_bits()).collect();
        cs.sort_unstable();
        cs.dedup();
        let key = |r: &CurveRow| match (taus.len() > 1, cs.len() > 1) {
            (true, false) => format!("[tau_bar={}]", r.tau_bar),
            (false, true) => format!("[c={}]", r.c),
            (true, true) => format!("[tau_bar={};c={}]", r.tau_bar, r.c),
            (false, false) => String::new(),
        };
        let prefix = if inputs.len() > 1 {
            format!("{}:", input.display())
        } else {
            String::new()
        };
        for m in metrics {
            for r in &rows {
                let (y, y_err) = r.metric(m);
                out.push(PlotRow {
                    series: format!("{prefix}{m}{}", key(r)),
                    x: r.t as f64,
                    y,
                    y_err,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_plot_data<W: Write>(rows: &[PlotRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "series,x,y,y_err")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.series, real(r.x), real(r.y), real(r.y_err))?;
    }
    Ok(())
}

/// Distinct series names, in first-seen order.
pub fn series_names(rows: &[PlotRow]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in rows {
        if !names.contains(&r.series) {
            names.push(r.series.clone());
        }
    }
    names
}
