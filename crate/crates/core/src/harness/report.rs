use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{RblError, Result};

pub const CSV_HEADER: [&str; 8] = [
    "estimator",
    "block",
    "sigma",
    "rmse",
    "trials",
    "failures",
    "mean_iters",
    "converged_frac",
];
pub const CSV_FILE: &str = "rmse.csv";
pub const PLOT_FILE: &str = "plot_rmse.py";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportRow {
    pub estimator: String,
    pub block: String,
    pub sigma: f64,
    /// NaN when every trial failed.
    pub rmse: f64,
    /// Attempted trials; `trials − failures` contributed to `rmse`.
    pub trials: usize,
    pub failures: usize,
    pub mean_iters: f64,
    pub converged_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RmseReport {
    pub rows: Vec<ReportRow>,
}

/// Nine significant digits.
fn num(v: f64) -> String {
    format!("{v:.8e}")
}

impl RmseReport {
    pub fn find(&self, estimator: &str, block: &str, sigma: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.block == block && r.sigma == sigma)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.estimator.clone(),
                r.block.clone(),
                num(r.sigma),
                num(r.rmse),
                r.trials.to_string(),
                r.failures.to_string(),
                num(r.mean_iters),
                num(r.converged_frac),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ascii csv")
    }

    /// Values rounded exactly as they are written to CSV.
    pub fn rounded(&self) -> RmseReport {
        let round = |v: f64| num(v).parse::<f64>().expect("formatted float");
        RmseReport {
            rows: self
                .rows
                .iter()
                .map(|r| ReportRow {
                    sigma: round(r.sigma),
                    rmse: round(r.rmse),
                    mean_iters: round(r.mean_iters),
                    converged_frac: round(r.converged_frac),
                    ..r.clone()
                })
                .collect(),
        }
    }
}

pub fn parse_csv(text: &str) -> Result<RmseReport> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd
        .headers()
        .map_err(|e| RblError::Parse {
            what: "report csv".into(),
            reason: e.to_string(),
        })?
        .clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(RblError::Parse {
            what: "report csv".into(),
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let rows = rd
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| RblError::Parse {
            what: "report csv".into(),
            reason: e.to_string(),
        })?;
    Ok(RmseReport { rows })
}

/// Matplotlib script drawing log-log RMSE against σ, one panel per block and
/// one line per estimator.
pub fn plot_script(csv_name: &str) -> String {
    format!(
        r#"import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
series = defaultdict(list)
with open(os.path.join(here, "{csv_name}")) as f:
    for row in csv.DictReader(f):
        series[(row["block"], row["estimator"])].append((float(row["sigma"]), float(row["rmse"])))

blocks = sorted({{b for b, _ in series}})
fig, axes = plt.subplots(1, len(blocks), figsize=(5 * len(blocks), 4), squeeze=False)
units = {{"rotation": "deg", "translation": "m", "position": "m"}}
for ax, block in zip(axes[0], blocks):
    for (b, est), pts in sorted(series.items()):
        if b != block:
            continue
        pts.sort()
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o", label=est)
    ax.set_title(block)
    ax.set_xlabel("range error sigma [m]")
    ax.set_ylabel("RMSE [" + units.get(block, "") + "]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "rmse.png"), dpi=150)
"#
    )
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| RblError::io(&path, e))?;
    Ok(path)
}

/// Writes `rmse.csv` and `plot_rmse.py` into `dir`, creating it if needed.
pub fn emit_report(report: &RmseReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| RblError::io(dir, e))?;
    let csv_path = write(dir.join(CSV_FILE), &report.to_csv_string())?;
    let plot_path = write(dir.join(PLOT_FILE), &plot_script(CSV_FILE))?;
    Ok(vec![csv_path, plot_path])
}
