//! Plot-data emission: one CSV per figure analog.

use std::collections::BTreeMap;
use std::path::Path;

use otpitch_core::evaluation::{ecdf, median};

use crate::config::Scenario;
use crate::runner::ResultTable;
use crate::{CliError, Result};

/// Emits the figure-analog CSVs for a completed sweep into `out_dir`:
/// GER-vs-SNR, GER-vs-inharmonicity, the Wasserstein-2 CDF at 2%
/// inharmonicity, median Wasserstein-2 vs inharmonicity, and
/// GER-vs-grid-count, as applicable to the scenario.
pub fn emit_plot_data(table: &ResultTable, scenario: Scenario, out_dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match scenario {
        Scenario::SnrSweep => {
            write_mean_ger(table, &out_dir.join("ger_vs_snr.csv"), "snr_db")?;
            written.push("ger_vs_snr.csv".into());
        }
        Scenario::InharmonicitySweep => {
            write_mean_ger(table, &out_dir.join("ger_vs_inharmonicity.csv"), "kappa")?;
            written.push("ger_vs_inharmonicity.csv".into());
            write_w2_median(table, &out_dir.join("w2_median_vs_inharmonicity.csv"))?;
            written.push("w2_median_vs_inharmonicity.csv".into());
            write_w2_cdf(table, &out_dir.join("w2_cdf.csv"))?;
            written.push("w2_cdf.csv".into());
        }
        Scenario::GridpointSweep => {
            write_grid_sweep(table, &out_dir.join("ger_vs_gridpoints.csv"))?;
            written.push("ger_vs_gridpoints.csv".into());
        }
        Scenario::SingleRun | Scenario::AudioFrames => {
            return Err(CliError::Config(format!(
                "scenario {} has no plot-data emission",
                scenario.name()
            )));
        }
    }
    Ok(written)
}

type GroupKey = (String, u64);

fn group_rows<'t>(
    table: &'t ResultTable,
) -> BTreeMap<GroupKey, Vec<&'t crate::runner::ResultRow>> {
    let mut groups: BTreeMap<GroupKey, Vec<&crate::runner::ResultRow>> = BTreeMap::new();
    for row in &table.rows {
        groups
            .entry((row.method.clone(), row.point.to_bits()))
            .or_default()
            .push(row);
    }
    groups
}

fn write_mean_ger(table: &ResultTable, path: &Path, point_name: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record([point_name, "method", "mean_ger", "trials"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for ((method, point_bits), rows) in group_rows(table) {
        let point = f64::from_bits(point_bits);
        let mean: f64 = rows.iter().map(|r| r.ger).sum::<f64>() / rows.len() as f64;
        w.write_record([
            point.to_string(),
            method,
            mean.to_string(),
            rows.len().to_string(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn write_w2_median(table: &ResultTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["kappa", "method", "median_w2", "trials_with_w2"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for ((method, point_bits), rows) in group_rows(table) {
        let point = f64::from_bits(point_bits);
        let w2s: Vec<f64> = rows.iter().filter_map(|r| r.w2).collect();
        if w2s.is_empty() {
            continue;
        }
        w.write_record([
            point.to_string(),
            method,
            median(&w2s).to_string(),
            w2s.len().to_string(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

/// CDF of the Wasserstein-2 distances at the sweep point closest to 2%
/// inharmonicity.
fn write_w2_cdf(table: &ResultTable, path: &Path) -> Result<()> {
    let mut points: Vec<f64> = table.rows.iter().map(|r| r.point).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let Some(&target) = points
        .iter()
        .min_by(|a, b| (*a - 0.02).abs().total_cmp(&(*b - 0.02).abs()))
    else {
        return Ok(());
    };

    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["kappa", "method", "w2", "cdf"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for ((method, point_bits), rows) in group_rows(table) {
        let point = f64::from_bits(point_bits);
        if point != target {
            continue;
        }
        let w2s: Vec<f64> = rows.iter().filter_map(|r| r.w2).collect();
        for (value, p) in ecdf(&w2s) {
            w.write_record([
                point.to_string(),
                method.clone(),
                value.to_string(),
                p.to_string(),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn write_grid_sweep(table: &ResultTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["f_count", "method", "mean_ger", "mean_runtime_sec", "trials"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for ((method, point_bits), rows) in group_rows(table) {
        let point = f64::from_bits(point_bits);
        let mean: f64 = rows.iter().map(|r| r.ger).sum::<f64>() / rows.len() as f64;
        let mean_rt: f64 =
            rows.iter().map(|r| r.runtime_sec).sum::<f64>() / rows.len() as f64;
        w.write_record([
            (point as usize).to_string(),
            method,
            mean.to_string(),
            mean_rt.to_string(),
            rows.len().to_string(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}
