//! Episodic extension: a small buffer of raw observations, admitted by
//! Bayesian surprise over the component means, that feeds real data into
//! model comparison alongside the fake data drawn from the semantic posterior.
//!
//! The semantic-only learner (capacity 0) and the non-selective sliding
//! window are degenerate configurations of the same learner.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussmath::{gaussian_kl, GaussianBelief};
use crate::model::{batch_model_posterior, map_index, ExactConfig, MogHypothesis};
use crate::semantic::{maybe_switch, CandidateEvidence, PosteriorState, SwitchConfig};

/// Which belief the updated posterior is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurpriseReference {
    /// The running posterior before the update (the online prior).
    #[default]
    Running,
    /// The initial prior N(m₀, v₀) of every component.
    InitialPrior,
}

/// Σ_j KL(updated_j ‖ reference_j) for a hypothetical assimilation of `x`.
pub fn surprise_with(state: &PosteriorState, x: f64, reference: SurpriseReference) -> Result<f64> {
    let updated = state.assimilate(x)?;
    let prior = GaussianBelief::new(state.hypothesis.prior_mean, state.hypothesis.prior_variance)?;
    updated
        .beliefs
        .iter()
        .zip(&state.beliefs)
        .map(|(post, current)| match reference {
            SurpriseReference::Running => gaussian_kl(*post, *current),
            SurpriseReference::InitialPrior => gaussian_kl(*post, prior),
        })
        .sum()
}

/// Bayesian surprise of `x` against the running posterior.
pub fn surprise(state: &PosteriorState, x: f64) -> Result<f64> {
    surprise_with(state, x, SurpriseReference::Running)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferItem {
    pub observation: f64,
    pub surprise_at_admission: f64,
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferPolicy {
    SurpriseGated,
    SlidingWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicBuffer {
    pub capacity: usize,
    pub items: Vec<BufferItem>,
    pub policy: BufferPolicy,
    pub threshold: f64,
    #[serde(default)]
    pub reference: SurpriseReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub admitted: bool,
    pub evicted: Option<f64>,
}

impl EpisodicBuffer {
    pub fn new(capacity: usize, policy: BufferPolicy, threshold: f64) -> Result<Self> {
        if !(threshold >= 0.0) {
            return Err(invalid(format!("threshold must be >= 0, got {threshold}")));
        }
        Ok(EpisodicBuffer { capacity, items: Vec::with_capacity(capacity), policy, threshold, reference: SurpriseReference::Running })
    }

    pub fn with_reference(mut self, reference: SurpriseReference) -> Self {
        self.reference = reference;
        self
    }

    pub fn observations(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.observation).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Offer `x` to the buffer, scoring it against `state`.
    pub fn admit(&self, state: &PosteriorState, x: f64, step: usize) -> Result<(Self, Admission)> {
        let s = if self.capacity == 0 { 0.0 } else { surprise_with(state, x, self.reference)? };
        self.admit_scored(state, x, s, step)
    }

    /// As [`admit`](Self::admit) with the surprise of `x` already computed
    /// against `state`.
    pub fn admit_scored(&self, state: &PosteriorState, x: f64, s: f64, step: usize) -> Result<(Self, Admission)> {
        let mut next = self.clone();
        let rejected = Admission { admitted: false, evicted: None };
        if self.capacity == 0 {
            return Ok((next, rejected));
        }
        let item = BufferItem { observation: x, surprise_at_admission: s, step_index: step };
        match self.policy {
            BufferPolicy::SlidingWindow => {
                let mut evicted = None;
                if next.items.len() >= self.capacity {
                    let oldest = oldest_index(&next.items);
                    evicted = Some(next.items.remove(oldest).observation);
                }
                next.items.push(item);
                Ok((next, Admission { admitted: true, evicted }))
            }
            BufferPolicy::SurpriseGated => {
                if !(s > self.threshold) {
                    return Ok((next, rejected));
                }
                if next.items.len() < self.capacity {
                    next.items.push(item);
                    return Ok((next, Admission { admitted: true, evicted: None }));
                }
                let scores = next
                    .items
                    .iter()
                    .map(|i| surprise_with(state, i.observation, self.reference))
                    .collect::<Result<Vec<_>>>()?;
                let victim = weakest_index(&next.items, &scores);
                if s > scores[victim] {
                    let old = next.items.remove(victim);
                    next.items.push(item);
                    Ok((next, Admission { admitted: true, evicted: Some(old.observation) }))
                } else {
                    Ok((next, rejected))
                }
            }
        }
    }
}

fn oldest_index(items: &[BufferItem]) -> usize {
    items
        .iter()
        .enumerate()
        .min_by_key(|(_, i)| i.step_index)
        .map(|(idx, _)| idx)
        .expect("nonempty buffer")
}

/// Lowest recomputed surprise, oldest first among equals.
fn weakest_index(items: &[BufferItem], scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..items.len() {
        let better = scores[i] < scores[best]
            || (scores[i] == scores[best] && items[i].step_index < items[best].step_index);
        if better {
            best = i;
        }
    }
    best
}

/// Learner tags as they appear in configs, traces and result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantTag {
    UL,
    EL2,
    EL1,
    ELb,
    SL,
}

impl VariantTag {
    pub const ALL: [VariantTag; 5] = [VariantTag::UL, VariantTag::EL2, VariantTag::EL1, VariantTag::ELb, VariantTag::SL];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantTag::UL => "UL",
            VariantTag::EL2 => "EL2",
            VariantTag::EL1 => "EL1",
            VariantTag::ELb => "ELb",
            VariantTag::SL => "SL",
        }
    }

    /// Buffer capacity and policy; `None` for the unconstrained learner.
    pub fn buffer_shape(&self) -> Option<(usize, BufferPolicy)> {
        match self {
            VariantTag::UL => None,
            VariantTag::EL2 => Some((2, BufferPolicy::SurpriseGated)),
            VariantTag::EL1 => Some((1, BufferPolicy::SurpriseGated)),
            VariantTag::ELb => Some((2, BufferPolicy::SlidingWindow)),
            VariantTag::SL => Some((0, BufferPolicy::SurpriseGated)),
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown variant {s:?}; expected one of UL, EL2, EL1, ELb, SL")))
    }
}

/// One record per observation; also the JSON-lines trace format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trial: Option<u64>,
    pub step: usize,
    pub x: f64,
    pub surprise: Option<f64>,
    pub admitted: bool,
    pub evicted: Option<f64>,
    pub switch_from: Option<usize>,
    pub switch_to: Option<usize>,
    pub candidate_evidences: Vec<CandidateEvidence>,
    pub belief_means: Vec<f64>,
    pub belief_variances: Vec<f64>,
    pub t: usize,
    /// Tracked (or MAP) component count after the step.
    pub k: usize,
    /// The switch's transfer fit hit the variance floor on every restart.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate_fit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub variant: VariantTag,
    pub initial_k: usize,
    pub events: Vec<StepEvent>,
}

impl RunTrace {
    pub fn k_trajectory(&self) -> Vec<usize> {
        std::iter::once(self.initial_k).chain(self.events.iter().map(|e| e.k)).collect()
    }

    pub fn final_k(&self) -> usize {
        self.events.last().map_or(self.initial_k, |e| e.k)
    }

    /// Whether k ever rose from below `target` to `target` or above.
    pub fn reached_from_below(&self, target: usize) -> bool {
        self.k_trajectory().windows(2).any(|w| w[0] < target && w[1] >= target)
    }
}

/// A resource-constrained learner: semantic posterior plus episodic buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub tag: VariantTag,
    pub state: PosteriorState,
    pub buffer: EpisodicBuffer,
    pub switch: SwitchConfig,
    pub steps: usize,
}

impl Learner {
    pub fn new(
        tag: VariantTag,
        state: PosteriorState,
        tau: f64,
        reference: SurpriseReference,
        switch: SwitchConfig,
    ) -> Result<Self> {
        let (capacity, policy) = tag
            .buffer_shape()
            .ok_or_else(|| invalid("the unconstrained learner has no online state; use run_unconstrained"))?;
        Self::with_buffer(tag, state, EpisodicBuffer::new(capacity, policy, tau)?.with_reference(reference), switch)
    }

    pub fn with_buffer(tag: VariantTag, state: PosteriorState, buffer: EpisodicBuffer, switch: SwitchConfig) -> Result<Self> {
        state.validate()?;
        switch.validate()?;
        Ok(Learner { tag, state, buffer, switch, steps: 0 })
    }

    /// One online step: score, compare models on buffer ∪ {x}, then either
    /// adopt the switched state (buffer consumed) or assimilate and offer x
    /// to the buffer under its pre-assimilation surprise.
    pub fn step<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<(Self, StepEvent)> {
        let s = surprise_with(&self.state, x, self.buffer.reference)?;
        let mut real = self.buffer.observations();
        real.push(x);
        let (switched_state, decision) = maybe_switch(&self.state, &real, &self.switch, rng)?;

        let mut next = self.clone();
        next.steps += 1;
        let admission = if decision.switched {
            next.state = switched_state;
            next.buffer.clear();
            Admission { admitted: false, evicted: None }
        } else {
            next.state = self.state.assimilate(x)?;
            let (buffer, admission) = self.buffer.admit_scored(&self.state, x, s, self.steps)?;
            next.buffer = buffer;
            admission
        };

        let event = StepEvent {
            trial: None,
            step: self.steps,
            x,
            surprise: Some(s),
            admitted: admission.admitted,
            evicted: admission.evicted,
            switch_from: decision.switched.then_some(decision.incumbent_k),
            switch_to: decision.switched.then_some(decision.winner_k),
            candidate_evidences: decision.candidate_evidences,
            belief_means: next.state.beliefs.iter().map(|b| b.mean).collect(),
            belief_variances: next.state.beliefs.iter().map(|b| b.variance).collect(),
            t: next.state.t,
            k: next.state.k(),
            degenerate_fit: decision.degenerate_fit,
        };
        Ok((next, event))
    }

    pub fn run<R: Rng + ?Sized>(&self, data: &[f64], rng: &mut R) -> Result<(Self, RunTrace)> {
        let initial_k = self.state.k();
        let mut learner = self.clone();
        let mut events = Vec::with_capacity(data.len());
        for &x in data {
            let (next, event) = learner.step(x, rng)?;
            learner = next;
            events.push(event);
        }
        Ok((learner, RunTrace { variant: self.tag, initial_k, events }))
    }
}

/// Batch oracle over every prefix. A switch is logged whenever the MAP k rises.
pub fn run_unconstrained(data: &[f64], model_space: &[MogHypothesis], cfg: &ExactConfig) -> Result<RunTrace> {
    let initial = batch_model_posterior(&[], model_space, cfg)?;
    let initial_k = initial[map_index(&initial)].0.k;
    let mut prev = initial_k;
    let mut events = Vec::with_capacity(data.len());
    for t in 1..=data.len() {
        let post = batch_model_posterior(&data[..t], model_space, cfg)?;
        let k = post[map_index(&post)].0.k;
        let rose = k > prev;
        events.push(StepEvent {
            trial: None,
            step: t - 1,
            x: data[t - 1],
            surprise: None,
            admitted: false,
            evicted: None,
            switch_from: rose.then_some(prev),
            switch_to: rose.then_some(k),
            candidate_evidences: post.iter().map(|(h, lp)| CandidateEvidence { k: h.k, log_evidence: *lp }).collect(),
            belief_means: Vec::new(),
            belief_variances: Vec::new(),
            t,
            k,
            degenerate_fit: false,
        });
        prev = k;
    }
    Ok(RunTrace { variant: VariantTag::UL, initial_k, events })
}
