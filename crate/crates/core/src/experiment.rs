//! Multi-run drivers: pacing tuning and comparison grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{set_path, ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::metrics::{instability_summary, read_metrics};
use crate::schedule::{PacingFunction, PacingShape};
use crate::train::{probe, run_with, RunStatus, RunSummary};
use crate::tuner::{tune, ProbeOutcome, TuneResult};

/// Pacing used for a probe at `(seqlen_start, duration)`: the shape of a
/// configured SLW method, otherwise linear.
pub fn probe_pacing(config: &ExperimentConfig, seqlen_start: usize, duration: u64) -> PacingFunction {
    let shape = match &config.method {
        Method::Slw { pacing } => pacing.shape.clone(),
        _ => PacingShape::Linear,
    };
    PacingFunction {
        shape,
        seqlen_start,
        seqlen_end: config.model.max_seqlen,
        duration,
    }
}

/// `config` with its seed and init seed both set to `seed`.
pub fn with_seed(config: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = config.clone();
    c.seed = seed;
    c.model.init_seed = seed;
    c
}

/// Runs the tuning plan in `config.tune`. Probe logs go to
/// `out_dir/probes/`; the result to `tune_result.json`, and the config with
/// the tuned pacing to `tuned_config.json`.
pub fn tune_experiment(
    config: &ExperimentConfig,
    tokens: &[u32],
    out_dir: &Path,
) -> Result<(TuneResult, ExperimentConfig)> {
    let plan = config
        .tune
        .clone()
        .ok_or_else(|| Error::config("config has no `tune` section"))?;
    let probe_dir = out_dir.join("probes");
    std::fs::create_dir_all(&probe_dir)?;
    let seeds: Vec<Option<u64>> = if plan.probe_seeds.is_empty() {
        vec![None]
    } else {
        plan.probe_seeds.iter().copied().map(Some).collect()
    };
    let mut probe_cfg = config.clone();
    probe_cfg.eval_every = plan.criterion.eval_every;

    let result = tune(
        |s, t| {
            let mut base = probe_cfg.clone();
            base.method = Method::Slw {
                pacing: probe_pacing(config, s, t),
            };
            let mut series = Vec::new();
            let mut steps = 0;
            for seed in &seeds {
                let cfg = seed.map_or_else(|| base.clone(), |s| with_seed(&base, s));
                let name = format!("s{s}_T{t}_seed{}.csv", cfg.seed);
                let (ppl, n) = probe(
                    &cfg,
                    tokens.to_vec(),
                    plan.criterion.window_steps,
                    Some(&probe_dir.join(name)),
                )?;
                if ppl.is_empty() {
                    return Err(Error::contract(format!(
                        "probe at seqlen_start={s}, duration={t} produced no validation point"
                    )));
                }
                series.push(ppl);
                steps = steps.max(n);
            }
            Ok(ProbeOutcome {
                series,
                steps_per_series: steps,
            })
        },
        &plan,
    )?;

    let mut tuned = config.clone();
    tuned.method = Method::Slw {
        pacing: probe_pacing(config, result.chosen_seqlen_start, result.chosen_duration),
    };
    tuned.tune = None;
    write_pretty(&out_dir.join("tune_result.json"), &result)?;
    write_pretty(&out_dir.join("tuned_config.json"), &tuned)?;
    Ok((result, tuned))
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// One grid cell: a label and dotted-key overrides of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub label: String,
    #[serde(default)]
    pub set: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    /// Base experiment config, inline or as a path relative to the grid file.
    pub base: Value,
    pub cells: Vec<GridCell>,
    /// Every cell runs once per seed (setting `seed` and `model.init_seed`);
    /// empty means once with the base seeds.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    1.2
}

/// A fully resolved grid entry.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub label: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl Grid {
    pub fn load(path: &Path) -> Result<(Self, Vec<GridRun>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read grid {}: {e}", path.display())))?;
        let mut grid: Grid = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Value::String(p) = &grid.base {
            let base_path = dir.join(p);
            let text = std::fs::read_to_string(&base_path).map_err(|e| {
                Error::config(format!("cannot read base config {}: {e}", base_path.display()))
            })?;
            grid.base = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", base_path.display())))?;
        }
        let runs = grid.expand(Some(dir))?;
        Ok((grid, runs))
    }

    /// Resolves every (cell, seed) pair, reporting all problems at once.
    pub fn expand(&self, base_dir: Option<&Path>) -> Result<Vec<GridRun>> {
        let mut problems = Vec::new();
        if !(self.threshold > 1.0) {
            problems.push(format!("threshold ({}) must exceed 1", self.threshold));
        }
        let base: ExperimentConfig = match serde_json::from_value(self.base.clone()) {
            Ok(b) => b,
            Err(e) => return Err(Error::Config(vec![format!("base: {e}")])),
        };
        let base_value = serde_json::to_value(&base)?;
        let seeds: Vec<Option<u64>> = if self.seeds.is_empty() {
            vec![None]
        } else {
            self.seeds.iter().copied().map(Some).collect()
        };
        let mut runs = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for cell in &self.cells {
            if cell.label.is_empty()
                || !cell
                    .label
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            {
                problems.push(format!(
                    "cell label {:?} must be non-empty and use only [A-Za-z0-9._-]",
                    cell.label
                ));
            }
            if !seen.insert(cell.label.clone()) {
                problems.push(format!("duplicate cell label {:?}", cell.label));
            }
            let mut value = base_value.clone();
            let mut ok = true;
            for (k, v) in &cell.set {
                if let Err(e) = set_path(&mut value, k, v.clone()) {
                    problems.push(format!("cell {}: {e}", cell.label));
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let mut config: ExperimentConfig = match serde_json::from_value(value) {
                Ok(c) => c,
                Err(e) => {
                    problems.push(format!("cell {}: {e}", cell.label));
                    continue;
                }
            };
            if let Some(dir) = base_dir {
                config.resolve_paths(dir);
            }
            for p in config.problems() {
                problems.push(format!("cell {}: {p}", cell.label));
            }
            for seed in &seeds {
                let config = seed.map_or_else(|| config.clone(), |s| with_seed(&config, s));
                runs.push(GridRun {
                    label: cell.label.clone(),
                    seed: config.seed,
                    config,
                });
            }
        }
        if problems.is_empty() && runs.len() < 2 {
            problems.push(format!(
                "a comparison needs at least 2 runs, the grid yields {}",
                runs.len()
            ));
        }
        if problems.is_empty() {
            Ok(runs)
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub seed: u64,
    pub method: String,
    pub lr_peak: f64,
    pub status: RunStatus,
    pub steps: u64,
    pub tokens_consumed: u64,
    pub spikes: usize,
    pub spike_fraction: f64,
    pub max_loss_ratio: f64,
    pub final_val_ppl: Option<f64>,
    pub wall_time_secs: f64,
    /// Set when the run failed for a reason other than divergence.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub runs: usize,
    pub diverged: usize,
    pub runs_with_spikes: usize,
    pub median_spikes: f64,
    /// Median over runs that completed.
    pub median_final_val_ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub a: String,
    pub b: String,
    /// Label with the lower median spike count; `None` on a tie.
    pub fewer_spikes: Option<String>,
    /// Label with the lower median final validation perplexity.
    pub lower_val_ppl: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub threshold: f64,
    pub rows: Vec<CompareRow>,
    pub cells: Vec<CellSummary>,
    pub pairs: Vec<PairVerdict>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Builds a row, counting spikes at `threshold` from the run's `metrics.csv`.
pub fn row_from_run(run: &GridRun, summary: &RunSummary, dir: &Path, threshold: f64) -> Result<CompareRow> {
    let ratios: Vec<f64> = read_metrics(&dir.join("metrics.csv"))?
        .iter()
        .map(|r| r.loss_ratio)
        .collect();
    let (spikes, spike_fraction) = if ratios.is_empty() {
        (0, 0.0)
    } else {
        let s = instability_summary(&ratios, threshold)?;
        (s.count_above, s.fraction)
    };
    Ok(CompareRow {
        label: run.label.clone(),
        seed: run.seed,
        method: summary.method.clone(),
        lr_peak: run.config.lr_schedule.peak,
        status: summary.status,
        steps: summary.steps,
        tokens_consumed: summary.tokens_consumed,
        spikes,
        spike_fraction,
        max_loss_ratio: summary.max_loss_ratio,
        final_val_ppl: summary.final_val_ppl,
        wall_time_secs: summary.wall_time_secs,
        error: None,
    })
}

pub fn summarize(rows: &[CompareRow], threshold: f64) -> CompareReport {
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let cells: Vec<CellSummary> = labels
        .iter()
        .map(|label| {
            let mine: Vec<&CompareRow> = rows.iter().filter(|r| &r.label == label).collect();
            let spikes: Vec<f64> = mine
                .iter()
                .filter(|r| r.error.is_none())
                .map(|r| r.spikes as f64)
                .collect();
            let ppl: Vec<f64> = mine
                .iter()
                .filter(|r| r.status == RunStatus::Completed && r.error.is_none())
                .filter_map(|r| r.final_val_ppl)
                .collect();
            CellSummary {
                label: label.clone(),
                runs: mine.len(),
                diverged: mine.iter().filter(|r| r.status == RunStatus::Diverged).count(),
                runs_with_spikes: mine.iter().filter(|r| r.spikes > 0).count(),
                median_spikes: median(&spikes).unwrap_or(f64::NAN),
                median_final_val_ppl: median(&ppl),
            }
        })
        .collect();
    let lower = |a: &CellSummary, b: &CellSummary, x: f64, y: f64| -> Option<String> {
        if x < y {
            Some(a.label.clone())
        } else if y < x {
            Some(b.label.clone())
        } else {
            None
        }
    };
    let mut pairs = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            let (a, b) = (&cells[i], &cells[j]);
            pairs.push(PairVerdict {
                a: a.label.clone(),
                b: b.label.clone(),
                fewer_spikes: lower(a, b, a.median_spikes, b.median_spikes),
                lower_val_ppl: match (a.median_final_val_ppl, b.median_final_val_ppl) {
                    (Some(x), Some(y)) => lower(a, b, x, y),
                    (Some(_), None) => Some(a.label.clone()),
                    (None, Some(_)) => Some(b.label.clone()),
                    (None, None) => None,
                },
            });
        }
    }
    CompareReport {
        threshold,
        rows: rows.to_vec(),
        cells,
        pairs,
    }
}

pub const COMPARE_COLUMNS: [&str; 13] = [
    "label",
    "seed",
    "method",
    "lr_peak",
    "status",
    "steps",
    "tokens_consumed",
    "spikes",
    "spike_fraction",
    "max_loss_ratio",
    "final_val_ppl",
    "wall_time_secs",
    "error",
];

pub fn write_compare_csv(path: &Path, report: &CompareReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(COMPARE_COLUMNS).map_err(io)?;
    for r in &report.rows {
        w.write_record([
            r.label.clone(),
            r.seed.to_string(),
            r.method.clone(),
            r.lr_peak.to_string(),
            match r.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Diverged => "diverged".into(),
            },
            r.steps.to_string(),
            r.tokens_consumed.to_string(),
            r.spikes.to_string(),
            r.spike_fraction.to_string(),
            r.max_loss_ratio.to_string(),
            r.final_val_ppl.map(|v| v.to_string()).unwrap_or_default(),
            format!("{:.3}", r.wall_time_secs),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every grid entry into `out_dir/runs/<label>/seed<seed>/` and writes
/// `compare.csv` and `compare.json`. A failed or diverged run is recorded
/// in its row; it does not stop the grid.
pub fn compare(
    runs: &[GridRun],
    threshold: f64,
    out_dir: &Path,
    mut on_done: impl FnMut(&CompareRow),
) -> Result<CompareReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut corpora: Vec<(crate::config::CorpusSpec, Vec<u32>)> = Vec::new();
    let mut rows = Vec::new();
    for run in runs {
        let dir = run_dir(out_dir, &run.label, run.seed);
        let tokens = match corpora.iter().find(|(spec, _)| spec == &run.config.corpus) {
            Some((_, t)) => Ok(t.clone()),
            None => run.config.corpus.load_tokens().inspect(|t| {
                corpora.push((run.config.corpus.clone(), t.clone()));
            }),
        };
        let row = match tokens.and_then(|t| run_with(&run.config, t, &dir, |_| {})) {
            Ok(summary) => row_from_run(run, &summary, &dir, threshold)?,
            Err(e) => CompareRow {
                label: run.label.clone(),
                seed: run.seed,
                method: run.config.method.name().into(),
                lr_peak: run.config.lr_schedule.peak,
                status: RunStatus::Diverged,
                steps: 0,
                tokens_consumed: 0,
                spikes: 0,
                spike_fraction: 0.0,
                max_loss_ratio: f64::NAN,
                final_val_ppl: None,
                wall_time_secs: 0.0,
                error: Some(e.to_string()),
            },
        };
        on_done(&row);
        rows.push(row);
    }
    let report = summarize(&rows, threshold);
    write_compare_csv(&out_dir.join("compare.csv"), &report)?;
    write_pretty(&out_dir.join("compare.json"), &report)?;
    Ok(report)
}

pub fn run_dir(out_dir: &Path, label: &str, seed: u64) -> PathBuf {
    out_dir.join("runs").join(label).join(format!("seed{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        serde_json::json!({
            "model": {"n_layers": 1, "hidden": 8, "n_heads": 2, "vocab": 256,
                      "max_seqlen": 16, "init_seed": 1},
            "lr_schedule": {"peak": 1e-3, "warmup": 64, "decay_horizon": 2048, "unit": "tokens"},
            "method": {"kind": "baseline"},
            "batch_size": 2,
            "target_tokens": 320,
            "seed": 1,
            "eval_every": 5,
            "val_fraction": 0.2,
            "corpus": {"kind": "synthetic", "seed": 2, "bytes": 2048}
        })
    }

    fn grid(cells: Vec<GridCell>, seeds: Vec<u64>) -> Grid {
        Grid {
            base: base(),
            cells,
            seeds,
            threshold: 1.2,
        }
    }

    fn lr_cell(label: &str, lr: f64) -> GridCell {
        GridCell {
            label: label.into(),
            set: [("lr_schedule.peak".to_string(), Value::from(lr))].into(),
        }
    }

    #[test]
    fn grid_cardinality() {
        let g = grid(vec![lr_cell("lo", 1e-3), lr_cell("hi", 1e-2)], vec![3, 4]);
        let runs = g.expand(None).unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(runs[1].config.model.init_seed, 4);
        assert_eq!(runs[2].config.lr_schedule.peak, 1e-2);
    }

    #[test]
    fn grid_problems_are_collected() {
        let mut bad = lr_cell("x y", 1e-3);
        bad.set.insert("nope".into(), Value::from(1));
        let g = grid(vec![bad, lr_cell("neg", -1.0)], vec![]);
        let Err(Error::Config(p)) = g.expand(None) else {
            panic!()
        };
        assert!(p.iter().any(|m| m.contains("label")));
        assert!(p.iter().any(|m| m.contains("nope")));
        assert!(p.iter().any(|m| m.contains("cell neg")));
    }

    #[test]
    fn single_run_grid_is_rejected() {
        assert!(grid(vec![lr_cell("a", 1e-3)], vec![]).expand(None).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn compare_rows_match_single_runs() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(vec![lr_cell("lo", 1e-3), lr_cell("hi", 3e-2)], vec![7]);
        let runs = g.expand(None).unwrap();
        let report = compare(&runs, 1.2, dir.path(), |_| {}).unwrap();
        assert_eq!(report.rows.len(), 2);
        let single = crate::train::run(&runs[0].config, &dir.path().join("single")).unwrap();
        let r = &report.rows[0];
        assert_eq!(r.steps, single.steps);
        assert_eq!(r.final_val_ppl, single.final_val_ppl);
        assert_eq!(Some(r.spikes), single.spikes_above(1.2));
        assert_eq!(report.pairs.len(), 1);
        assert!(dir.path().join("compare.csv").exists());
        assert!(run_dir(dir.path(), "hi", 7).join("metrics.csv").exists());
    }
}
