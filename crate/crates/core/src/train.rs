//! The step engine and the run driver.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::data::{build_index, validation_batches, Batch, BatchSampler, CorpusIndex};
use crate::error::{Error, Result};
use crate::metrics::{
    instability_summary, perplexity, InstabilitySummary, LossRatioTracker, MetricLog,
    MetricRecord,
};
use crate::model::{init_parameters, loss_and_grads, loss_on_batch, Parameters};
use crate::optim::{adam_step, clip_global_norm, variance_stats, AdamState};
use crate::schedule::{
    batch_size_at, lr_at, mixed_seqlen_at, seqlen_at, should_terminate, two_stage_seqlen_at,
};

/// Loss-ratio thresholds reported in every summary.
pub const SPIKE_THRESHOLDS: [f64; 2] = [1.2, 1.5];

pub const VERSION: &str = concat!("seqwarm-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    pub adam: AdamState,
    /// Steps completed so far; also the index of the next step.
    pub step: u64,
    pub tokens_consumed: u64,
    pub tracker: LossRatioTracker,
    pub sampler: BatchSampler,
}

/// A run in progress: config, data, and state.
pub struct Trainer {
    config: ExperimentConfig,
    index: CorpusIndex,
    val: Vec<Batch>,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, tokens: Vec<u32>) -> Result<Self> {
        config.validate()?;
        let index = build_index(tokens, config.model.max_seqlen, config.val_fraction, config.seed)?;
        if let Some(t) = index.max_token() {
            if t as usize >= config.model.vocab {
                return Err(Error::Data(format!(
                    "corpus token {t} is outside the model vocabulary of {}",
                    config.model.vocab
                )));
            }
        }
        let val = validation_batches(&index, config.batch_size)?;
        let params = init_parameters(&config.model)?;
        let adam = AdamState::new(config.optimizer.clone(), params.tensors());
        Ok(Self {
            config: config.clone(),
            index,
            val,
            state: TrainState {
                params,
                adam,
                step: 0,
                tokens_consumed: 0,
                tracker: LossRatioTracker::new(),
                sampler: BatchSampler::new(),
            },
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }

    /// Sequence length the configured method uses at step `t`.
    pub fn seqlen_for(&self, t: u64) -> usize {
        let full = self.config.model.max_seqlen;
        match &self.config.method {
            Method::Baseline | Method::BszWarmup { .. } => full,
            Method::Slw { pacing } => seqlen_at(t, pacing),
            Method::TwoStage {
                stage1_len,
                switch_step,
            } => two_stage_seqlen_at(t, &Method::two_stage_pacing(*stage1_len, *switch_step, full)),
            Method::MixedSeqlen {
                short_len,
                period,
                short_steps,
            } => mixed_seqlen_at(t, &Method::mixed(*short_len, *period, *short_steps, full)),
        }
    }

    /// Batch size after `tokens_consumed` tokens.
    pub fn batch_size_for(&self, tokens_consumed: u64) -> usize {
        match &self.config.method {
            Method::BszWarmup { warmup } => batch_size_at(tokens_consumed, warmup),
            _ => self.config.batch_size,
        }
    }

    pub fn finished(&self) -> bool {
        should_terminate(self.state.tokens_consumed, self.config.target_tokens)
    }

    /// Validation perplexity over every full-length validation window.
    pub fn validate(&self) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in &self.val {
            let n = batch.tokens.rows() * (batch.seqlen - 1);
            total += loss_on_batch(&self.state.params, &batch.tokens)? * n as f64;
            count += n;
        }
        Ok(perplexity(total / count as f64))
    }

    /// One optimizer step. The learning rate is read at the progress
    /// reached by the end of this step, so under a token-unit schedule the
    /// logged `lr` equals `lr_at(tokens_consumed)` of the same row.
    pub fn step(&mut self) -> Result<MetricRecord> {
        if self.finished() {
            return Err(Error::contract("token budget already reached"));
        }
        let t = self.state.step;
        let seqlen = self.seqlen_for(t);
        let bsz = self.batch_size_for(self.state.tokens_consumed);
        let batch = self
            .state
            .sampler
            .next_batch(&self.index, bsz, seqlen, t)?;
        let (loss, mut grads) = loss_and_grads(&self.state.params, &batch.tokens)?;
        let loss_ratio = self.state.tracker.update(t, loss)?;
        let clip = clip_global_norm(&mut grads, self.state.params.names(), self.config.clip_norm)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step: t, loss },
                other => other,
            })?;
        let tokens_after = self.state.tokens_consumed + (bsz * seqlen) as u64;
        let schedule = &self.config.lr_schedule;
        let lr = lr_at(schedule.progress(t + 1, tokens_after), schedule)?;
        adam_step(self.state.params.tensors_mut(), &grads, &mut self.state.adam, lr)?;
        self.state.step += 1;
        self.state.tokens_consumed = tokens_after;

        let stats = variance_stats(&self.state.adam);
        let val_ppl = if self.state.step % self.config.eval_every == 0 || self.finished() {
            Some(self.validate()?)
        } else {
            None
        };
        Ok(MetricRecord {
            step: t,
            tokens_consumed: tokens_after,
            seqlen_t: seqlen,
            batch_size: bsz,
            lr,
            train_loss: loss,
            loss_ratio,
            grad_norm_preclip: clip.pre_norm,
            clipped: clip.clipped,
            var_l1: stats.var_l1,
            var_max: stats.var_max,
            mom_l1: stats.mom_l1,
            val_ppl,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.state.params.clone(),
            adam: self.state.adam.clone(),
            step: self.state.step,
            tokens_consumed: self.state.tokens_consumed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub status: RunStatus,
    pub steps: u64,
    pub tokens_consumed: u64,
    pub final_val_ppl: Option<f64>,
    pub best_val_ppl: Option<f64>,
    /// One entry per threshold in [`SPIKE_THRESHOLDS`].
    pub instability: Vec<InstabilitySummary>,
    pub max_loss_ratio: f64,
    pub wall_time_secs: f64,
    pub divergence: Option<Divergence>,
}

impl RunSummary {
    pub fn spikes_above(&self, threshold: f64) -> Option<usize> {
        self.instability
            .iter()
            .find(|s| s.threshold == threshold)
            .map(|s| s.count_above)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub init_seed: u64,
    pub config: ExperimentConfig,
    pub summary: Option<RunSummary>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        line: Some(e.line() as u64),
        reason: e.to_string(),
    })
}

/// Trains until the token budget is reached, writing `metrics.csv`,
/// `manifest.json`, `checkpoint.bin` and `summary.json` into `out_dir`.
/// Divergence halts the run, keeps the partial log, and is reported
/// through the summary status rather than as an error.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let tokens = config.corpus.load_tokens()?;
    run_with(config, tokens, out_dir, |_| {})
}

pub fn run_with(
    config: &ExperimentConfig,
    tokens: Vec<u32>,
    out_dir: &Path,
    mut observer: impl FnMut(&MetricRecord),
) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest {
        version: VERSION.to_string(),
        config_hash: config.hash()?,
        seed: config.seed,
        init_seed: config.model.init_seed,
        config: config.clone(),
        summary: None,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    let started = Instant::now();
    let mut trainer = Trainer::new(config, tokens)?;
    let mut log = MetricLog::create(&out_dir.join("metrics.csv"))?;
    let mut ratios = Vec::new();
    let (mut final_val, mut best_val) = (None, None::<f64>);
    let mut divergence = None;
    while !trainer.finished() {
        match trainer.step() {
            Ok(record) => {
                log.append(&record)?;
                ratios.push(record.loss_ratio);
                if let Some(v) = record.val_ppl {
                    final_val = Some(v);
                    best_val = Some(best_val.map_or(v, |b| b.min(v)));
                }
                observer(&record);
            }
            Err(Error::Diverged { step, loss }) => {
                divergence = Some(Divergence { step, loss });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    drop(log);
    trainer.checkpoint().save(&out_dir.join("checkpoint.bin"))?;

    let instability = if ratios.is_empty() {
        Vec::new()
    } else {
        SPIKE_THRESHOLDS
            .iter()
            .map(|&th| instability_summary(&ratios, th))
            .collect::<Result<_>>()?
    };
    let summary = RunSummary {
        method: config.method.name().to_string(),
        status: if divergence.is_some() {
            RunStatus::Diverged
        } else {
            RunStatus::Completed
        },
        steps: trainer.state.step,
        tokens_consumed: trainer.state.tokens_consumed,
        final_val_ppl: final_val,
        best_val_ppl: best_val,
        instability,
        max_loss_ratio: ratios.iter().copied().fold(f64::NAN, f64::max),
        wall_time_secs: started.elapsed().as_secs_f64(),
        divergence,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    manifest.summary = Some(summary.clone());
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(summary)
}

/// Trains at most `window_steps` steps and returns the validation
/// perplexities observed, one per evaluation. A divergence ends the series
/// with `+inf`. When `log` is given the probe's records are written there.
pub fn probe(
    config: &ExperimentConfig,
    tokens: Vec<u32>,
    window_steps: u64,
    log: Option<&Path>,
) -> Result<(Vec<f64>, u64)> {
    let mut trainer = Trainer::new(config, tokens)?;
    let mut log = log.map(MetricLog::create).transpose()?;
    let mut series = Vec::new();
    while trainer.state.step < window_steps && !trainer.finished() {
        match trainer.step() {
            Ok(record) => {
                if let Some(l) = log.as_mut() {
                    l.append(&record)?;
                }
                series.extend(record.val_ppl);
            }
            Err(Error::Diverged { .. }) => {
                series.push(f64::INFINITY);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((series, trainer.state.step))
}
