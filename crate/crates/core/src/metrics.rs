//! Instability instruments and the per-step run log.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Tracks `loss_t / min(loss_0..loss_{t-1})`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossRatioTracker {
    running_min: Option<f64>,
    history: Vec<(f64, f64)>,
}

impl LossRatioTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Lowest loss seen so far, if any.
    pub fn running_min(&self) -> Option<f64> {
        self.running_min
    }

    /// `(loss, ratio)` for every step so far.
    pub fn history(&self) -> &[(f64, f64)] {
        &self.history
    }

    /// Ratio of `loss` to the minimum over all previous steps (1.0 on the
    /// first step), then folds `loss` into that minimum. A non-finite loss
    /// is a divergence and leaves the tracker untouched.
    pub fn update(&mut self, step: u64, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let ratio = match self.running_min {
            Some(min) => loss / min,
            None => 1.0,
        };
        self.running_min = Some(self.running_min.map_or(loss, |m| m.min(loss)));
        self.history.push((loss, ratio));
        Ok(ratio)
    }
}

/// Loss ratios for a whole loss trace, computed from scratch.
pub fn loss_ratios(losses: &[f64]) -> Vec<f64> {
    let mut min = f64::INFINITY;
    losses
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let r = if i == 0 { 1.0 } else { l / min };
            min = min.min(l);
            r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstabilitySummary {
    pub threshold: f64,
    /// Steps whose ratio is strictly above `threshold`.
    pub count_above: usize,
    pub fraction: f64,
    pub max_ratio: f64,
    pub steps: usize,
}

pub fn instability_summary(ratios: &[f64], threshold: f64) -> Result<InstabilitySummary> {
    if ratios.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if !(threshold > 1.0) {
        return Err(Error::contract(format!(
            "instability threshold must exceed 1, got {threshold}"
        )));
    }
    let count_above = ratios.iter().filter(|&&r| r > threshold).count();
    let max_ratio = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(InstabilitySummary {
        threshold,
        count_above,
        fraction: count_above as f64 / ratios.len() as f64,
        max_ratio,
        steps: ratios.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Sample Pearson correlation with a two-sided p-value from the Student-t
/// distribution with `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::contract(format!(
            "pearson needs two series of equal length >= 3 (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if n == 2 || (1.0 - r * r) <= 0.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, p_value, n })
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Divides every value by the series maximum.
pub fn normalize_series(x: &[f64]) -> Result<Vec<f64>> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Normalization(format!(
            "series maximum must be positive and finite, got {max}"
        )));
    }
    Ok(x.iter().map(|v| v / max).collect())
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub tokens_consumed: u64,
    pub seqlen_t: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub loss_ratio: f64,
    pub grad_norm_preclip: f64,
    pub clipped: bool,
    pub var_l1: f64,
    pub var_max: f64,
    pub mom_l1: f64,
    pub val_ppl: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "step",
    "tokens_consumed",
    "seqlen_t",
    "batch_size",
    "lr",
    "train_loss",
    "loss_ratio",
    "grad_norm_preclip",
    "clipped",
    "var_l1",
    "var_max",
    "mom_l1",
    "val_ppl",
];

/// 17 significant digits: parsing the text recovers the exact `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl MetricRecord {
    fn to_fields(&self) -> [String; 13] {
        [
            self.step.to_string(),
            self.tokens_consumed.to_string(),
            self.seqlen_t.to_string(),
            self.batch_size.to_string(),
            format_float(self.lr),
            format_float(self.train_loss),
            format_float(self.loss_ratio),
            format_float(self.grad_norm_preclip),
            u8::from(self.clipped).to_string(),
            format_float(self.var_l1),
            format_float(self.var_max),
            format_float(self.mom_l1),
            self.val_ppl.map(format_float).unwrap_or_default(),
        ]
    }

    fn from_fields(fields: &csv::StringRecord) -> std::result::Result<Self, String> {
        if fields.len() != CSV_COLUMNS.len() {
            return Err(format!(
                "expected {} columns, found {}",
                CSV_COLUMNS.len(),
                fields.len()
            ));
        }
        fn num<T: std::str::FromStr>(fields: &csv::StringRecord, i: usize) -> std::result::Result<T, String> {
            fields[i]
                .parse()
                .map_err(|_| format!("column `{}`: cannot parse {:?}", CSV_COLUMNS[i], &fields[i]))
        }
        Ok(Self {
            step: num(fields, 0)?,
            tokens_consumed: num(fields, 1)?,
            seqlen_t: num(fields, 2)?,
            batch_size: num(fields, 3)?,
            lr: num(fields, 4)?,
            train_loss: num(fields, 5)?,
            loss_ratio: num(fields, 6)?,
            grad_norm_preclip: num(fields, 7)?,
            clipped: match &fields[8] {
                "1" => true,
                "0" => false,
                other => return Err(format!("column `clipped`: expected 0 or 1, found {other:?}")),
            },
            var_l1: num(fields, 9)?,
            var_max: num(fields, 10)?,
            mom_l1: num(fields, 11)?,
            val_ppl: if fields[12].is_empty() {
                None
            } else {
                Some(num(fields, 12)?)
            },
        })
    }
}

/// Append-only writer for `metrics.csv`; every record is flushed so the
/// file can be tailed while a run is in progress.
pub struct MetricLog<W: Write> {
    writer: csv::Writer<W>,
}

impl MetricLog<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Self::new(file)
    }
}

impl<W: Write> MetricLog<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new().from_writer(inner);
        writer.write_record(CSV_COLUMNS).map_err(csv_err)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        self.writer.write_record(record.to_fields()).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Parses a metrics log; errors name the file and the 1-based line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read(path)?;
    parse_metrics(&text, &path.display().to_string())
}

pub fn parse_metrics(bytes: &[u8], label: &str) -> Result<Vec<MetricRecord>> {
    let malformed = |line: Option<u64>, reason: String| Error::Malformed {
        path: label.to_string(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| malformed(Some(1), e.to_string()))?
        .clone();
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(malformed(
            Some(1),
            format!("header must be {}", CSV_COLUMNS.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line());
        out.push(MetricRecord::from_fields(&row).map_err(|reason| malformed(line, reason))?);
    }
    Ok(out)
}
