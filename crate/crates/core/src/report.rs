//! Consolidates run directories into the analysis tables the plotting side
//! reads.
//!
//! Outputs, one row per run (or per run and step):
//!
//! - `instability.csv`: `run,method,threshold,count_above,fraction,max_ratio,steps`
//! - `correlation.csv`: `run,x,y,r,p_value,n` for loss ratio against
//!   `var_l1` and `var_max`; `r` and `p_value` are empty when undefined
//! - `normalized_series.csv`: `run,step,loss_ratio,var_l1,var_max`, each
//!   divided by its per-run maximum
//! - `val_ppl.csv`: `run,step,tokens_consumed,val_ppl`

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{
    format_float, instability_summary, normalize_series, pearson, read_metrics, MetricRecord,
};
use crate::train::{read_manifest, SPIKE_THRESHOLDS};

pub struct RunLog {
    pub label: String,
    pub method: String,
    pub records: Vec<MetricRecord>,
}

/// Loads `metrics.csv` and `manifest.json` from each directory. Runs are
/// labelled by directory name, made unique with a numeric suffix.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<RunLog>> {
    let mut out: Vec<RunLog> = Vec::new();
    for dir in dirs {
        let manifest = read_manifest(dir)?;
        let records = read_metrics(&dir.join("metrics.csv")).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("{}: {io}", dir.join("metrics.csv").display())),
            other => other,
        })?;
        let base = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let mut label = base.clone();
        let mut k = 2;
        while out.iter().any(|r| r.label == label) {
            label = format!("{base}-{k}");
            k += 1;
        }
        out.push(RunLog {
            label,
            method: manifest.config.method.name().to_string(),
            records,
        });
    }
    Ok(out)
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(w)
}

fn row(w: &mut csv::Writer<std::fs::File>, fields: Vec<String>) -> Result<()> {
    w.write_record(fields)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Writes the four analysis tables into `out_dir` and returns their paths.
pub fn report_data(dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if dirs.is_empty() {
        return Err(Error::config("report-data needs at least one run directory"));
    }
    let runs = load_runs(dirs)?;
    std::fs::create_dir_all(out_dir)?;
    let paths: Vec<PathBuf> = [
        "instability.csv",
        "correlation.csv",
        "normalized_series.csv",
        "val_ppl.csv",
    ]
    .iter()
    .map(|n| out_dir.join(n))
    .collect();

    let mut inst = writer(
        &paths[0],
        &["run", "method", "threshold", "count_above", "fraction", "max_ratio", "steps"],
    )?;
    let mut corr = writer(&paths[1], &["run", "x", "y", "r", "p_value", "n"])?;
    let mut norm = writer(&paths[2], &["run", "step", "loss_ratio", "var_l1", "var_max"])?;
    let mut val = writer(&paths[3], &["run", "step", "tokens_consumed", "val_ppl"])?;

    for run in &runs {
        let column = |f: fn(&MetricRecord) -> f64| -> Vec<f64> { run.records.iter().map(f).collect() };
        let ratio = column(|r| r.loss_ratio);
        let var_l1 = column(|r| r.var_l1);
        let var_max = column(|r| r.var_max);
        if ratio.is_empty() {
            continue;
        }
        for th in SPIKE_THRESHOLDS {
            let s = instability_summary(&ratio, th)?;
            row(
                &mut inst,
                vec![
                    run.label.clone(),
                    run.method.clone(),
                    th.to_string(),
                    s.count_above.to_string(),
                    format_float(s.fraction),
                    format_float(s.max_ratio),
                    ratio.len().to_string(),
                ],
            )?;
        }
        for (name, y) in [("var_l1", &var_l1), ("var_max", &var_max)] {
            let (r, p) = match pearson(&ratio, y) {
                Ok(c) => (format_float(c.r), format_float(c.p_value)),
                Err(Error::UndefinedCorrelation) | Err(Error::Contract(_)) => {
                    (String::new(), String::new())
                }
                Err(e) => return Err(e),
            };
            row(
                &mut corr,
                vec![
                    run.label.clone(),
                    "loss_ratio".into(),
                    name.into(),
                    r,
                    p,
                    ratio.len().to_string(),
                ],
            )?;
        }
        let n = [&ratio, &var_l1, &var_max]
            .iter()
            .map(|s| normalize_series(s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Normalization(msg) => Error::Normalization(format!("run {}: {msg}", run.label)),
                other => other,
            })?;
        for (i, rec) in run.records.iter().enumerate() {
            row(
                &mut norm,
                vec![
                    run.label.clone(),
                    rec.step.to_string(),
                    format_float(n[0][i]),
                    format_float(n[1][i]),
                    format_float(n[2][i]),
                ],
            )?;
        }
        for rec in &run.records {
            if let Some(v) = rec.val_ppl {
                row(
                    &mut val,
                    vec![
                        run.label.clone(),
                        rec.step.to_string(),
                        rec.tokens_consumed.to_string(),
                        format_float(v),
                    ],
                )?;
            }
        }
    }
    for w in [&mut inst, &mut corr, &mut norm, &mut val] {
        w.flush()?;
    }
    Ok(paths)
}
