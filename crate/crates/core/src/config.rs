//! Experiment configuration: one JSON document fully describes a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{load_corpus, synthetic_corpus, tokenize_bytes, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SEQLEN_GRANULARITY};
use crate::optim::AdamConfig;
use crate::schedule::{BszWarmup, LrSchedule, MixedSeqlen, PacingFunction, PacingShape};
use crate::tuner::TunePlan;

/// How each step's sequence length and batch size are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Full length, fixed batch size.
    Baseline,
    /// Sequence length warmup.
    Slw { pacing: PacingFunction },
    /// `stage1_len` tokens until `switch_step`, then full length.
    TwoStage {
        #[serde(default = "default_stage1_len")]
        stage1_len: usize,
        switch_step: u64,
    },
    /// Full length with a batch-size ramp; `batch_size` is ignored.
    BszWarmup { warmup: BszWarmup },
    /// Short length for the first `short_steps` of every `period` steps.
    MixedSeqlen {
        #[serde(default = "default_stage1_len")]
        short_len: usize,
        #[serde(default = "default_period")]
        period: u64,
        #[serde(default = "default_short_steps")]
        short_steps: u64,
    },
}

fn default_stage1_len() -> usize {
    128
}
fn default_period() -> u64 {
    1000
}
fn default_short_steps() -> u64 {
    900
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Slw { .. } => "slw",
            Method::TwoStage { .. } => "two_stage",
            Method::BszWarmup { .. } => "bsz_warmup",
            Method::MixedSeqlen { .. } => "mixed_seqlen",
        }
    }

    /// Pacing function equivalent to a two-stage method.
    pub fn two_stage_pacing(stage1_len: usize, switch_step: u64, full: usize) -> PacingFunction {
        PacingFunction::two_stage(stage1_len, full, switch_step)
    }

    pub fn mixed(short_len: usize, period: u64, short_steps: u64, full: usize) -> MixedSeqlen {
        MixedSeqlen {
            short_len,
            full_len: full,
            period,
            short_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    /// Plain files read as raw bytes and concatenated in order.
    Files { paths: Vec<PathBuf> },
    /// Generated text; see [`synthetic_corpus`].
    Synthetic { seed: u64, bytes: usize },
}

impl CorpusSpec {
    pub fn load_tokens(&self) -> Result<Vec<u32>> {
        match self {
            CorpusSpec::Files { paths } => Ok(tokenize_bytes(&load_corpus(paths)?)),
            CorpusSpec::Synthetic { seed, bytes } => {
                Ok(tokenize_bytes(&synthetic_corpus(*seed, *bytes)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub method: Method,
    pub batch_size: usize,
    pub target_tokens: u64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Drives the data order. Parameter init is driven by `model.init_seed`.
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub tune: Option<TunePlan>,
}

fn default_clip_norm() -> f64 {
    1.0
}
fn default_eval_every() -> u64 {
    100
}
fn default_val_fraction() -> f64 {
    0.05
}

impl ExperimentConfig {
    /// Parses and validates; every problem found is reported at once.
    pub fn from_value(value: Value) -> Result<Self> {
        let config: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        Self::from_value(value)
    }

    /// Reads `path`, applies `key=value` overrides, resolves relative corpus
    /// paths against the file's directory, and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        // A manifest carries the resolved config under `config`.
        let raw = match raw {
            Value::Object(mut m) if m.contains_key("config_hash") && m.contains_key("config") => {
                m.remove("config").expect("checked")
            }
            other => other,
        };
        let parsed: Self =
            serde_json::from_value(raw).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut value = serde_json::to_value(&parsed)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let CorpusSpec::Files { paths } = &mut self.corpus {
            for p in paths.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        out.extend(self.optimizer.problems());
        out.extend(self.lr_schedule.problems("lr_schedule"));
        if !(self.lr_schedule.peak >= 0.0 && self.lr_schedule.peak.is_finite()) {
            out.push(format!(
                "lr_schedule.peak ({}) must be finite and non-negative",
                self.lr_schedule.peak
            ));
        }
        let full = self.model.max_seqlen;
        match &self.method {
            Method::Baseline => {}
            Method::Slw { pacing } => {
                out.extend(pacing.problems("method.pacing"));
                if matches!(pacing.shape, PacingShape::TwoStage { .. }) {
                    out.push("method.pacing: use method kind two_stage for a two-stage schedule".into());
                }
                if pacing.seqlen_end != full {
                    out.push(format!(
                        "method.pacing.seqlen_end ({}) must equal model.max_seqlen ({full})",
                        pacing.seqlen_end
                    ));
                }
            }
            Method::TwoStage {
                stage1_len,
                switch_step,
            } => out.extend(
                Method::two_stage_pacing(*stage1_len, *switch_step, full).problems("method"),
            ),
            Method::BszWarmup { warmup } => out.extend(warmup.problems("method.warmup")),
            Method::MixedSeqlen {
                short_len,
                period,
                short_steps,
            } => out.extend(Method::mixed(*short_len, *period, *short_steps, full).problems("method")),
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if self.target_tokens == 0 {
            out.push("target_tokens must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            out.push(format!("clip_norm ({}) must be positive", self.clip_norm));
        }
        if self.eval_every == 0 {
            out.push("eval_every must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            out.push(format!("val_fraction ({}) must lie in (0, 1)", self.val_fraction));
        }
        match &self.corpus {
            CorpusSpec::Files { paths } if paths.is_empty() => {
                out.push("corpus.paths must list at least one file".into());
            }
            CorpusSpec::Synthetic { bytes, .. } if *bytes < 2 * full => {
                out.push(format!(
                    "corpus.bytes ({bytes}) must be at least twice model.max_seqlen ({full})"
                ));
            }
            _ => {}
        }
        if self.model.vocab < BYTE_VOCAB {
            out.push(format!(
                "model.vocab ({}) must cover the byte vocabulary ({BYTE_VOCAB})",
                self.model.vocab
            ));
        }
        if let Some(plan) = &self.tune {
            out.extend(plan.problems("tune"));
            if let Some(bad) = plan
                .seqlen_candidates
                .iter()
                .find(|&&s| s > full || (s % SEQLEN_GRANULARITY != 0 && s != 8))
            {
                out.push(format!(
                    "tune.seqlen_candidates: {bad} must be a multiple of {SEQLEN_GRANULARITY} no larger than {full}"
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

/// Applies one `dotted.key=value` override. The key must already exist;
/// the value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::config(format!("override `{assignment}` is not of the form key=value"))
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, key, value)
}

/// Replaces the value at an existing dotted path.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::config(format!("unknown config key `{key}`"));
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part).ok_or_else(unknown)?,
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| unknown())?;
                items.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    *node = value;
    Ok(())
}
