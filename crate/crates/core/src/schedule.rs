//! Sequence-length pacing, learning-rate and batch-size schedules.
//!
//! Every schedule here is a pure function of a step index or a token count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SEQLEN_GRANULARITY;

/// Absolute floor on any emitted length: next-token loss needs two tokens.
pub const MIN_SEQLEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PacingShape {
    /// `s + (e - s) · min(t/T, 1)`
    Linear,
    /// `s + (e - s) · min((t/T)^degree, 1)`
    Root { degree: f64 },
    /// `stage1_len` before `switch_step`, full length afterwards.
    TwoStage { stage1_len: usize, switch_step: u64 },
}

/// Maps a training step to the sequence length of that step's batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacingFunction {
    pub shape: PacingShape,
    pub seqlen_start: usize,
    pub seqlen_end: usize,
    /// Steps until the full length is reached.
    pub duration: u64,
}

impl PacingFunction {
    pub fn linear(seqlen_start: usize, seqlen_end: usize, duration: u64) -> Self {
        Self {
            shape: PacingShape::Linear,
            seqlen_start,
            seqlen_end,
            duration,
        }
    }

    pub fn root(seqlen_start: usize, seqlen_end: usize, duration: u64, degree: f64) -> Self {
        Self {
            shape: PacingShape::Root { degree },
            seqlen_start,
            seqlen_end,
            duration,
        }
    }

    pub fn two_stage(stage1_len: usize, seqlen_end: usize, switch_step: u64) -> Self {
        Self {
            shape: PacingShape::TwoStage {
                stage1_len,
                switch_step,
            },
            seqlen_start: stage1_len,
            seqlen_end,
            duration: switch_step.max(1),
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.seqlen_start < 1 || self.seqlen_start > self.seqlen_end {
            out.push(format!(
                "{prefix}.seqlen_start ({}) must satisfy 1 <= seqlen_start <= seqlen_end ({})",
                self.seqlen_start, self.seqlen_end
            ));
        }
        if self.seqlen_end % SEQLEN_GRANULARITY != 0 || self.seqlen_end == 0 {
            out.push(format!(
                "{prefix}.seqlen_end ({}) must be a positive multiple of the granularity {SEQLEN_GRANULARITY}",
                self.seqlen_end
            ));
        }
        if self.duration < 1 {
            out.push(format!("{prefix}.duration must be at least 1"));
        }
        match self.shape {
            PacingShape::Root { degree } if !(degree > 0.0 && degree.is_finite()) => {
                out.push(format!("{prefix}.shape.degree ({degree}) must be positive"));
            }
            PacingShape::TwoStage { stage1_len, .. }
                if stage1_len < MIN_SEQLEN || stage1_len > self.seqlen_end =>
            {
                out.push(format!(
                    "{prefix}.shape.stage1_len ({stage1_len}) must lie in [{MIN_SEQLEN}, seqlen_end]"
                ));
            }
            _ => {}
        }
        out
    }
}

/// Sequence length for step `t`.
///
/// The raw pacing value is floored to an integer, reduced to a multiple of
/// 8, and raised to at least `min(seqlen_start, 8)` (and never below 2).
/// From `t >= duration` on the result is exactly `seqlen_end`.
pub fn seqlen_at(t: u64, p: &PacingFunction) -> usize {
    let (s, e, big_t) = (p.seqlen_start, p.seqlen_end, p.duration.max(1));
    let raw = match p.shape {
        PacingShape::TwoStage { .. } => return two_stage_seqlen_at(t, p),
        _ if t >= big_t => return e,
        PacingShape::Linear => {
            let span = (e - s) as u128;
            s + (span * t as u128 / big_t as u128) as usize
        }
        PacingShape::Root { degree } => {
            let frac = (t as f64 / big_t as f64).powf(degree).min(1.0);
            let value = s as f64 + (e - s) as f64 * frac;
            // Absorb rounding just below an exact integer.
            (value + 1e-9).floor() as usize
        }
    };
    granular(raw, s)
}

fn granular(raw: usize, seqlen_start: usize) -> usize {
    let reduced = raw - raw % SEQLEN_GRANULARITY;
    let floor = seqlen_start.min(SEQLEN_GRANULARITY).max(MIN_SEQLEN);
    reduced.max(floor)
}

/// Two-stage curriculum: `stage1_len` before `switch_step`, then full length.
/// Non-two-stage pacing functions fall back to [`seqlen_at`].
pub fn two_stage_seqlen_at(t: u64, p: &PacingFunction) -> usize {
    match p.shape {
        PacingShape::TwoStage {
            stage1_len,
            switch_step,
        } => {
            if t < switch_step {
                stage1_len
            } else {
                p.seqlen_end
            }
        }
        _ => seqlen_at(t, p),
    }
}

/// Periodic short/long alternation used to probe how abrupt length changes
/// affect stability: `short_len` for the first `short_steps` of every
/// `period` steps, `full_len` for the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedSeqlen {
    #[serde(default = "default_mixed_short")]
    pub short_len: usize,
    pub full_len: usize,
    #[serde(default = "default_mixed_period")]
    pub period: u64,
    #[serde(default = "default_mixed_short_steps")]
    pub short_steps: u64,
}

fn default_mixed_short() -> usize {
    128
}
fn default_mixed_period() -> u64 {
    1000
}
fn default_mixed_short_steps() -> u64 {
    900
}

impl MixedSeqlen {
    pub fn new(full_len: usize) -> Self {
        Self {
            short_len: default_mixed_short(),
            full_len,
            period: default_mixed_period(),
            short_steps: default_mixed_short_steps(),
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.short_len < MIN_SEQLEN || self.short_len > self.full_len {
            out.push(format!(
                "{prefix}.short_len ({}) must lie in [{MIN_SEQLEN}, full_len ({})]",
                self.short_len, self.full_len
            ));
        }
        if self.period == 0 || self.short_steps > self.period {
            out.push(format!(
                "{prefix}: need 0 < period and short_steps <= period (got {} / {})",
                self.short_steps, self.period
            ));
        }
        out
    }
}

pub fn mixed_seqlen_at(t: u64, m: &MixedSeqlen) -> usize {
    if t % m.period < m.short_steps {
        m.short_len
    } else {
        m.full_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    Steps,
    Tokens,
}

/// Linear warmup from zero, then a single cosine decay to `min_lr`.
/// `warmup` and `decay_horizon` are in `unit`s (steps or tokens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    #[serde(default)]
    pub min_lr: f64,
    pub warmup: u64,
    pub decay_horizon: u64,
    pub unit: ScheduleUnit,
}

impl LrSchedule {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak) {
            out.push(format!(
                "{prefix}: need 0 <= min_lr ({}) <= peak ({})",
                self.min_lr, self.peak
            ));
        }
        if self.decay_horizon <= self.warmup {
            out.push(format!(
                "{prefix}.decay_horizon ({}) must exceed warmup ({})",
                self.decay_horizon, self.warmup
            ));
        }
        out
    }

    /// Progress measure this schedule reads: the step index or tokens seen.
    pub fn progress(&self, step: u64, tokens_consumed: u64) -> u64 {
        match self.unit {
            ScheduleUnit::Steps => step,
            ScheduleUnit::Tokens => tokens_consumed,
        }
    }
}

pub fn lr_at(progress: u64, s: &LrSchedule) -> Result<f64> {
    if s.decay_horizon <= s.warmup {
        return Err(Error::config(format!(
            "lr decay_horizon ({}) must exceed warmup ({})",
            s.decay_horizon, s.warmup
        )));
    }
    if progress < s.warmup {
        return Ok(s.peak * progress as f64 / s.warmup as f64);
    }
    let d = ((progress - s.warmup) as f64 / (s.decay_horizon - s.warmup) as f64).clamp(0.0, 1.0);
    Ok(s.min_lr + 0.5 * (s.peak - s.min_lr) * (1.0 + (std::f64::consts::PI * d).cos()))
}

/// Linear batch-size ramp over the first `ramp_tokens` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BszWarmup {
    pub start_bsz: usize,
    pub end_bsz: usize,
    pub ramp_tokens: u64,
}

impl BszWarmup {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.start_bsz < 1 || self.start_bsz > self.end_bsz {
            out.push(format!(
                "{prefix}: need 1 <= start_bsz ({}) <= end_bsz ({})",
                self.start_bsz, self.end_bsz
            ));
        }
        out
    }
}

pub fn batch_size_at(tokens_consumed: u64, w: &BszWarmup) -> usize {
    if tokens_consumed >= w.ramp_tokens {
        return w.end_bsz;
    }
    let span = (w.end_bsz - w.start_bsz) as u128;
    w.start_bsz + (span * tokens_consumed as u128 / w.ramp_tokens as u128) as usize
}

pub fn should_terminate(tokens_consumed: u64, target_tokens: u64) -> bool {
    tokens_consumed >= target_tokens
}
