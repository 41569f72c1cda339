//! Low-cost tuning of the pacing start length and duration.
//!
//! Each probe trains only the first `window_steps` steps of a candidate
//! configuration and reports its validation perplexity at every
//! `eval_every` steps. A probe "fluctuates" when some perplexity exceeds
//! `factor` times the best perplexity seen before it. The tuner picks the
//! smallest start length whose probe is calm, then bisects for the longest
//! calm duration.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationCriterion {
    #[serde(default = "default_factor")]
    pub factor: f64,
    /// Training steps per probe.
    pub window_steps: u64,
    /// Steps between validation evaluations inside a probe; also the
    /// lattice spacing of the duration search.
    pub eval_every: u64,
}

fn default_factor() -> f64 {
    1.3
}

impl FluctuationCriterion {
    /// Window of `multiple` LR-warmup lengths.
    pub fn from_warmup(lr_warmup_steps: u64, multiple: u64, eval_every: u64) -> Self {
        Self {
            factor: default_factor(),
            window_steps: lr_warmup_steps * multiple,
            eval_every,
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.factor > 1.0) {
            out.push(format!("{prefix}.factor ({}) must exceed 1", self.factor));
        }
        if self.eval_every == 0 || self.window_steps < self.eval_every {
            out.push(format!(
                "{prefix}: need 0 < eval_every ({}) <= window_steps ({})",
                self.eval_every, self.window_steps
            ));
        }
        out
    }
}

/// True when some probe exceeds `factor` times the minimum of all probes
/// before it.
pub fn detect_fluctuation(val_ppl_probes: &[f64], factor: f64) -> Result<bool> {
    if val_ppl_probes.is_empty() {
        return Err(Error::contract("no validation probes to inspect"));
    }
    let mut best = f64::INFINITY;
    for &p in val_ppl_probes {
        if !p.is_finite() || p > factor * best {
            return Ok(true);
        }
        best = best.min(p);
    }
    Ok(false)
}

/// What a probe run reports back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    /// Validation perplexity series, one per probe seed.
    pub series: Vec<Vec<f64>>,
    /// Training steps each series cost.
    pub steps_per_series: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    SeqlenStart,
    Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub kind: TrialKind,
    pub seqlen_start: usize,
    pub duration: u64,
    pub fluctuated: bool,
    /// Training steps spent on this probe, summed over seeds.
    pub cost_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub chosen_seqlen_start: usize,
    pub chosen_duration: u64,
    pub trials: Vec<Trial>,
    /// A calm duration was seen above a fluctuating one; the duration was
    /// then chosen by a linear scan instead of bisection.
    pub non_monotone: bool,
}

impl TuneResult {
    pub fn total_probe_steps(&self) -> u64 {
        self.trials.iter().map(|t| t.cost_steps).sum()
    }
}

fn judge(outcome: &ProbeOutcome, criterion: &FluctuationCriterion) -> Result<(bool, u64)> {
    if outcome.series.is_empty() {
        return Err(Error::contract("probe returned no series"));
    }
    if outcome.steps_per_series > criterion.window_steps {
        return Err(Error::contract(format!(
            "probe trained {} steps, window is {}",
            outcome.steps_per_series, criterion.window_steps
        )));
    }
    let mut votes = 0;
    for s in &outcome.series {
        if detect_fluctuation(s, criterion.factor)? {
            votes += 1;
        }
    }
    // Strict majority of seeds must fluctuate.
    let fluctuated = 2 * votes > outcome.series.len();
    Ok((
        fluctuated,
        outcome.steps_per_series * outcome.series.len() as u64,
    ))
}

/// Smallest candidate start length whose probe does not fluctuate.
/// `probe(seqlen_start)` trains the first window with that start length.
pub fn tune_seqlen_start<F>(
    mut probe: F,
    candidates: &[usize],
    criterion: &FluctuationCriterion,
) -> Result<(usize, Vec<Trial>)>
where
    F: FnMut(usize) -> Result<(u64, ProbeOutcome)>,
{
    if candidates.is_empty() {
        return Err(Error::contract("no start-length candidates"));
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("start-length candidates must be strictly ascending"));
    }
    if let Some(bad) = candidates.iter().find(|&&c| c == 0 || c % 8 != 0) {
        return Err(Error::contract(format!(
            "start-length candidate {bad} is not a positive multiple of 8"
        )));
    }
    let mut trials = Vec::new();
    for &s in candidates {
        let (duration, outcome) = probe(s)?;
        let (fluctuated, cost_steps) = judge(&outcome, criterion)?;
        trials.push(Trial {
            kind: TrialKind::SeqlenStart,
            seqlen_start: s,
            duration,
            fluctuated,
            cost_steps,
        });
        if !fluctuated {
            return Ok((s, trials));
        }
    }
    Err(Error::TuningFailed(format!(
        "every start length in {candidates:?} fluctuates; try larger candidates"
    )))
}

/// Lattice `t_lo, t_lo + g, ...` up to `t_hi`, with `g = eval_every`.
pub fn duration_lattice(t_lo: u64, t_hi: u64, granularity: u64) -> Vec<u64> {
    (0..=(t_hi - t_lo) / granularity)
        .map(|k| t_lo + k * granularity)
        .collect()
}

/// Largest lattice duration whose probe does not fluctuate, by bisection
/// under the assumption that longer durations fluctuate no less often.
/// `probe(duration)` trains the first window with that duration.
pub fn tune_duration<F>(
    mut probe: F,
    t_lo: u64,
    t_hi: u64,
    criterion: &FluctuationCriterion,
) -> Result<(u64, Vec<Trial>)>
where
    F: FnMut(u64) -> Result<(usize, ProbeOutcome)>,
{
    if t_lo < 1 || t_lo > t_hi {
        return Err(Error::contract(format!(
            "duration range [{t_lo}, {t_hi}] is empty or starts below 1"
        )));
    }
    if criterion.eval_every == 0 {
        return Err(Error::contract("eval_every must be positive"));
    }
    let lattice = duration_lattice(t_lo, t_hi, criterion.eval_every);
    let mut trials = Vec::new();
    // Invariant: index `lo` is calm (or -1), index `hi` fluctuates (or len).
    let (mut lo, mut hi) = (-1i64, lattice.len() as i64);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let duration = lattice[mid as usize];
        let (seqlen_start, outcome) = probe(duration)?;
        let (fluctuated, cost_steps) = judge(&outcome, criterion)?;
        trials.push(Trial {
            kind: TrialKind::Duration,
            seqlen_start,
            duration,
            fluctuated,
            cost_steps,
        });
        if fluctuated {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if lo < 0 {
        return Err(Error::TuningFailed(format!(
            "even the shortest duration {t_lo} fluctuates"
        )));
    }
    Ok((lattice[lo as usize], trials))
}

/// Search plan for [`tune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunePlan {
    /// Ascending start lengths to try; conventionally begins at 8.
    pub seqlen_candidates: Vec<usize>,
    /// Duration used while searching the start length.
    pub initial_duration: u64,
    pub duration_lo: u64,
    pub duration_hi: u64,
    pub criterion: FluctuationCriterion,
    /// Seeds each probe is trained with; empty means the run's own seed.
    /// A probe fluctuates when a strict majority of its seeds do.
    #[serde(default)]
    pub probe_seeds: Vec<u64>,
}

impl TunePlan {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = self.criterion.problems(&format!("{prefix}.criterion"));
        if self.seqlen_candidates.is_empty() {
            out.push(format!("{prefix}.seqlen_candidates must not be empty"));
        }
        if self.duration_lo < 1 || self.duration_lo > self.duration_hi {
            out.push(format!(
                "{prefix}: need 1 <= duration_lo ({}) <= duration_hi ({})",
                self.duration_lo, self.duration_hi
            ));
        }
        if self.initial_duration < 1 {
            out.push(format!("{prefix}.initial_duration must be at least 1"));
        }
        out
    }
}

/// Full procedure: start-length search at `initial_duration`, then duration
/// bisection with the chosen start length.
///
/// The start-length stage leaves one calm trial at `initial_duration`. If
/// that duration lies on the search lattice above the bisection result, the
/// monotonicity assumption is broken; the remaining lattice points above the
/// result are then scanned from the top and the largest calm one wins.
pub fn tune<F>(mut probe: F, plan: &TunePlan) -> Result<TuneResult>
where
    F: FnMut(usize, u64) -> Result<ProbeOutcome>,
{
    let criterion = &plan.criterion;
    let mut seen: HashMap<(usize, u64), ProbeOutcome> = HashMap::new();
    let mut cached = |s: usize, t: u64| -> Result<ProbeOutcome> {
        if let Some(o) = seen.get(&(s, t)) {
            return Ok(o.clone());
        }
        let o = probe(s, t)?;
        seen.insert((s, t), o.clone());
        Ok(o)
    };
    let (seqlen_start, mut trials) = tune_seqlen_start(
        |s| Ok((plan.initial_duration, cached(s, plan.initial_duration)?)),
        &plan.seqlen_candidates,
        criterion,
    )?;
    let (mut duration, more) = tune_duration(
        |t| Ok((seqlen_start, cached(seqlen_start, t)?)),
        plan.duration_lo,
        plan.duration_hi,
        criterion,
    )?;
    trials.extend(more);
    // Repeated (start, duration) pairs were answered from the cache.
    for i in 0..trials.len() {
        let (s, t) = (trials[i].seqlen_start, trials[i].duration);
        if trials[..i].iter().any(|p| p.seqlen_start == s && p.duration == t) {
            trials[i].cost_steps = 0;
        }
    }

    let lattice = duration_lattice(plan.duration_lo, plan.duration_hi, criterion.eval_every);
    let calm_above = trials.iter().any(|t| {
        t.seqlen_start == seqlen_start
            && !t.fluctuated
            && t.duration > duration
            && lattice.contains(&t.duration)
    });
    if calm_above {
        for &candidate in lattice.iter().rev().filter(|&&t| t > duration) {
            let known = trials
                .iter()
                .find(|t| t.seqlen_start == seqlen_start && t.duration == candidate)
                .map(|t| t.fluctuated);
            let fluctuated = match known {
                Some(f) => f,
                None => {
                    let outcome = cached(seqlen_start, candidate)?;
                    let (fluctuated, cost_steps) = judge(&outcome, criterion)?;
                    trials.push(Trial {
                        kind: TrialKind::Duration,
                        seqlen_start,
                        duration: candidate,
                        fluctuated,
                        cost_steps,
                    });
                    fluctuated
                }
            };
            if !fluctuated {
                duration = candidate;
                break;
            }
        }
    }
    Ok(TuneResult {
        chosen_seqlen_start: seqlen_start,
        chosen_duration: duration,
        trials,
        non_monotone: calm_above,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crit() -> FluctuationCriterion {
        FluctuationCriterion {
            factor: 1.3,
            window_steps: 50,
            eval_every: 10,
        }
    }

    fn calm() -> ProbeOutcome {
        ProbeOutcome {
            series: vec![vec![100.0, 90.0, 80.0]],
            steps_per_series: 30,
        }
    }

    fn spiky() -> ProbeOutcome {
        ProbeOutcome {
            series: vec![vec![100.0, 90.0, 200.0]],
            steps_per_series: 30,
        }
    }

    #[test]
    fn fluctuation_examples() {
        assert!(!detect_fluctuation(&[100.0, 90.0, 80.0], 1.3).unwrap());
        assert!(detect_fluctuation(&[100.0, 90.0, 120.0], 1.3).unwrap());
        assert!(!detect_fluctuation(&[100.0, 90.0, 116.0], 1.3).unwrap());
        assert!(!detect_fluctuation(&[42.0], 1.3).unwrap());
        assert!(detect_fluctuation(&[], 1.3).is_err());
        assert!(detect_fluctuation(&[10.0, f64::NAN], 1.3).unwrap());
    }

    #[test]
    fn fluctuation_is_monotone_in_factor() {
        let s = [50.0, 40.0, 30.0, 44.0, 29.0, 35.0];
        let mut last = true;
        for k in 0..40 {
            let f = 1.05 + 0.02 * k as f64;
            let now = detect_fluctuation(&s, f).unwrap();
            assert!(last || !now, "flipped back to true at {f}");
            last = now;
        }
    }

    #[test]
    fn seqlen_start_stable_everywhere() {
        let (s, trials) = tune_seqlen_start(|_| Ok((100, calm())), &[8, 16, 32], &crit()).unwrap();
        assert_eq!(s, 8);
        assert_eq!(trials.len(), 1);
    }

    #[test]
    fn seqlen_start_threshold() {
        let (s, trials) = tune_seqlen_start(
            |s| Ok((100, if s < 64 { spiky() } else { calm() })),
            &[8, 16, 32, 64, 128],
            &crit(),
        )
        .unwrap();
        assert_eq!(s, 64);
        assert_eq!(trials.len(), 4);
    }

    #[test]
    fn seqlen_start_all_fail() {
        let err = tune_seqlen_start(|_| Ok((100, spiky())), &[8, 16], &crit()).unwrap_err();
        assert!(matches!(err, Error::TuningFailed(_)));
        assert!(err.to_string().contains("larger"));
    }

    #[test]
    fn seqlen_candidates_validated() {
        assert!(tune_seqlen_start(|_| Ok((1, calm())), &[8, 12], &crit()).is_err());
        assert!(tune_seqlen_start(|_| Ok((1, calm())), &[16, 8], &crit()).is_err());
        assert!(tune_seqlen_start(|_| Ok((1, calm())), &[], &crit()).is_err());
    }

    #[test]
    fn duration_threshold_search() {
        let mut calls = 0;
        let (t, trials) = tune_duration(
            |t| {
                calls += 1;
                Ok((8, if t > 60 { spiky() } else { calm() }))
            },
            10,
            100,
            &crit(),
        )
        .unwrap();
        assert_eq!(t, 60);
        // ceil(log2(90 / 10)) + 1
        assert!(calls <= 5, "{calls}");
        assert_eq!(trials.len(), calls);
    }

    #[test]
    fn duration_never_fluctuates() {
        let (t, _) = tune_duration(|_| Ok((8, calm())), 10, 100, &crit()).unwrap();
        assert_eq!(t, 100);
    }

    #[test]
    fn duration_lower_bound_fluctuates() {
        let err = tune_duration(|_| Ok((8, spiky())), 10, 100, &crit()).unwrap_err();
        assert!(matches!(err, Error::TuningFailed(_)));
    }

    #[test]
    fn probe_over_window_is_rejected() {
        let long = ProbeOutcome {
            series: vec![vec![1.0, 1.0]],
            steps_per_series: 51,
        };
        assert!(matches!(
            tune_duration(|_| Ok((8, long.clone())), 10, 20, &crit()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn majority_vote_across_seeds() {
        let two_of_three = ProbeOutcome {
            series: vec![vec![1.0, 5.0], vec![1.0, 5.0], vec![1.0, 1.0]],
            steps_per_series: 10,
        };
        assert!(judge(&two_of_three, &crit()).unwrap().0);
        let one_of_three = ProbeOutcome {
            series: vec![vec![1.0, 5.0], vec![1.0, 1.0], vec![1.0, 1.0]],
            steps_per_series: 10,
        };
        let (f, cost) = judge(&one_of_three, &crit()).unwrap();
        assert!(!f);
        assert_eq!(cost, 30);
    }

    #[test]
    fn full_procedure_and_fallback() {
        let plan = TunePlan {
            seqlen_candidates: vec![8, 16, 32],
            initial_duration: 80,
            duration_lo: 10,
            duration_hi: 100,
            criterion: crit(),
            probe_seeds: vec![],
        };
        // Monotone: stable iff s >= 16 and T <= 80.
        let mut calls = Vec::new();
        let r = tune(
            |s, t| {
                calls.push((s, t));
                Ok(if s >= 16 && t <= 80 { calm() } else { spiky() })
            },
            &plan,
        )
        .unwrap();
        assert_eq!((r.chosen_seqlen_start, r.chosen_duration), (16, 80));
        assert!(!r.non_monotone);
        let mut distinct = calls.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), calls.len());
        assert_eq!(r.total_probe_steps(), 30 * calls.len() as u64);

        // Non-monotone: a fluctuating pocket at 50..=60 misleads bisection
        // below 80, which the start-length stage already saw as calm.
        let r = tune(
            |_, t| Ok(if (50..=60).contains(&t) || t > 90 { spiky() } else { calm() }),
            &plan,
        )
        .unwrap();
        assert!(r.non_monotone);
        assert_eq!(r.chosen_duration, 90);
    }
}
