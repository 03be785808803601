//! Monte Carlo harness: seeded trials, switch-probability estimates with
//! binomial error bars, difficulty balancing and threshold sweeps.
//!
//! Every trial draws its randomness from (master_seed, trial_index) alone, so
//! results are identical whatever the degree of parallelism.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::episodic::{run_unconstrained, Learner, RunTrace, SurpriseReference, VariantTag};
use crate::error::{invalid, Error, Result};
use crate::gaussmath::GaussianBelief;
use crate::model::{generate_dataset, DataOrdering, Dataset, Generator, MogHypothesis};
use crate::semantic::{PosteriorState, SwitchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    K2,
    K3,
}

impl Condition {
    pub const BOTH: [Condition; 2] = [Condition::K2, Condition::K3];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::K2 => "k2",
            Condition::K3 => "k3",
        }
    }

    /// Component count of the generator, which is also the switch target.
    pub fn target_k(&self) -> usize {
        match self {
            Condition::K2 => 2,
            Condition::K3 => 3,
        }
    }

    /// Component count the constrained learners start from.
    pub fn start_k(&self) -> usize {
        self.target_k() - 1
    }

    /// Equally spaced, zero-centred generator means with gap `delta`.
    pub fn generator_means(&self, delta: f64) -> Vec<f64> {
        match self {
            Condition::K2 => vec![-delta / 2.0, delta / 2.0],
            Condition::K3 => vec![-delta, 0.0, delta],
        }
    }

    /// "1->2" or "2->3".
    pub fn transition(&self) -> String {
        format!("{}->{}", self.start_k(), self.target_k())
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Threshold that accepts `"inf"` in JSON, where infinities are not numbers.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(pub f64);

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold(v)),
            Raw::Text(s) => parse_threshold(&s).map_err(serde::de::Error::custom),
        }
    }
}

pub fn parse_threshold(s: &str) -> Result<Threshold> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(Threshold(f64::INFINITY)),
        other => other
            .parse::<f64>()
            .map(Threshold)
            .map_err(|_| invalid(format!("not a threshold: {s:?}"))),
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub condition: Condition,
    #[serde(alias = "T")]
    pub length: usize,
    pub n_runs: usize,
    /// Gap between neighbouring generator means in the k2 condition.
    pub delta: f64,
    /// Gap for the k3 condition; falls back to `delta`.
    pub delta_k3: Option<f64>,
    pub noise_variance: f64,
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub ordering: DataOrdering,
    pub variants: Vec<VariantTag>,
    pub master_seed: u64,
    pub tau: Threshold,
    pub surprise_reference: SurpriseReference,
    pub switch: SwitchConfig,
    /// Largest k the unconstrained learner considers.
    pub model_space_kmax: usize,
    /// Observations the k3 learners are assumed to have seen before the run,
    /// split evenly between their two starting components.
    pub k3_pilot_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            condition: Condition::K2,
            length: 12,
            n_runs: 1000,
            delta: 4.0,
            delta_k3: None,
            noise_variance: 1.0,
            prior_mean: 0.0,
            prior_variance: 400.0,
            ordering: DataOrdering::Sampled,
            variants: VariantTag::ALL.to_vec(),
            master_seed: 2016,
            tau: Threshold(0.25),
            surprise_reference: SurpriseReference::Running,
            switch: SwitchConfig::default(),
            model_space_kmax: 4,
            k3_pilot_points: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(invalid("n_runs must be >= 1"));
        }
        if self.length == 0 {
            return Err(invalid("length must be >= 1"));
        }
        if !(self.delta > 0.0) || self.delta_k3.is_some_and(|d| !(d > 0.0)) {
            return Err(invalid("separations must be > 0"));
        }
        if !(self.noise_variance > 0.0) || !(self.prior_variance > 0.0) {
            return Err(invalid("variances must be > 0"));
        }
        if !(self.tau.0 >= 0.0) {
            return Err(invalid("tau must be >= 0"));
        }
        if self.variants.is_empty() {
            return Err(invalid("at least one variant is required"));
        }
        if self.model_space_kmax == 0 {
            return Err(invalid("model_space_kmax must be >= 1"));
        }
        self.switch.validate()
    }

    pub fn separation(&self, condition: Condition) -> f64 {
        match condition {
            Condition::K2 => self.delta,
            Condition::K3 => self.delta_k3.unwrap_or(self.delta),
        }
    }

    pub fn generator(&self) -> Generator {
        Generator::uniform(self.condition.generator_means(self.separation(self.condition)), self.noise_variance)
    }

    pub fn hypothesis(&self, k: usize) -> Result<MogHypothesis> {
        MogHypothesis::uniform(k, self.noise_variance, self.prior_mean, self.prior_variance)
    }

    pub fn model_space(&self) -> Result<Vec<MogHypothesis>> {
        (1..=self.model_space_kmax).map(|k| self.hypothesis(k)).collect()
    }

    pub fn for_condition(&self, condition: Condition) -> Self {
        ExperimentConfig { condition, ..self.clone() }
    }

    /// Starting state of the constrained learners. For k3 the incumbent k = 2
    /// model sits on the two outer generator means with the posterior width of
    /// `k3_pilot_points / 2` observations each.
    pub fn initial_state(&self) -> Result<PosteriorState> {
        match self.condition {
            Condition::K2 => PosteriorState::init(self.hypothesis(1)?),
            Condition::K3 => {
                let outer = self.separation(Condition::K3);
                let per_component = self.k3_pilot_points as f64 / 2.0;
                let variance = 1.0 / (1.0 / self.prior_variance + per_component / self.noise_variance);
                let beliefs = vec![GaussianBelief::new(-outer, variance)?, GaussianBelief::new(outer, variance)?];
                PosteriorState::from_beliefs(self.hypothesis(2)?, beliefs, self.k3_pilot_points)
            }
        }
    }

    fn learner(&self, tag: VariantTag) -> Result<Learner> {
        Learner::new(tag, self.initial_state()?, self.tau.0, self.surprise_reference, self.switch.clone())
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one random stream of one trial.
pub fn derive_seed(master_seed: u64, trial_index: u64, stream: u64) -> u64 {
    mix(mix(mix(master_seed) ^ trial_index) ^ stream)
}

const DATA_STREAM: u64 = 0;
const LEARNER_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub dataset: Dataset,
    /// One trace per configured variant, in configuration order.
    pub traces: Vec<RunTrace>,
}

/// One trial: a single dataset shared by all variants. Constrained variants
/// all start from the same learner stream, so with identical buffers they
/// make identical draws.
pub fn run_trial(cfg: &ExperimentConfig, trial_index: u64) -> Result<TrialOutcome> {
    cfg.validate()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, trial_index, DATA_STREAM));
    let dataset = generate_dataset(&cfg.generator(), cfg.length, cfg.ordering, &mut data_rng)?;
    let learner_seed = derive_seed(cfg.master_seed, trial_index, LEARNER_STREAM);

    let traces = cfg
        .variants
        .iter()
        .map(|&tag| {
            let trace = match tag {
                VariantTag::UL => run_unconstrained(&dataset.points, &cfg.model_space()?, &cfg.switch.exact),
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(learner_seed);
                    cfg.learner(tag)?.run(&dataset.points, &mut rng).map(|(_, t)| t)
                }
            };
            trace.map_err(|e| Error::TrialFailed { trial: trial_index, variant: tag.to_string(), source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialOutcome { trial: trial_index, dataset, traces })
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| invalid(format!("cannot build thread pool: {e}")))
}

/// All `n_runs` trials, ordered by trial index. The first failing trial (by
/// index) aborts the batch.
pub fn run_trials(cfg: &ExperimentConfig, parallelism: usize) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    let results: Vec<Result<TrialOutcome>> = if parallelism <= 1 {
        (0..cfg.n_runs as u64).map(|i| run_trial(cfg, i)).collect()
    } else {
        pool(parallelism)?.install(|| (0..cfg.n_runs as u64).into_par_iter().map(|i| run_trial(cfg, i)).collect())
    };
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: VariantTag,
    pub n_runs: usize,
    pub switches: usize,
    pub probability: f64,
    pub std_error: f64,
    /// Histogram of the tracked k at the end of each trial.
    pub final_k_counts: BTreeMap<usize, usize>,
}

impl VariantStats {
    pub fn from_counts(variant: VariantTag, switches: usize, n_runs: usize) -> Self {
        let p = switches as f64 / n_runs as f64;
        VariantStats {
            variant,
            n_runs,
            switches,
            probability: p,
            std_error: (p * (1.0 - p) / n_runs as f64).sqrt(),
            final_k_counts: BTreeMap::new(),
        }
    }

    /// sqrt(SE_a² + SE_b²)
    pub fn combined_se(&self, other: &VariantStats) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchStats {
    pub condition: Condition,
    pub separation: f64,
    pub tau: Threshold,
    pub master_seed: u64,
    pub rows: Vec<VariantStats>,
}

impl SwitchStats {
    pub fn get(&self, tag: VariantTag) -> Option<&VariantStats> {
        self.rows.iter().find(|r| r.variant == tag)
    }

    pub fn probability(&self, tag: VariantTag) -> Option<f64> {
        self.get(tag).map(|r| r.probability)
    }
}

/// A trial counts as a switch for a variant iff its tracked k rises from
/// below the generator's k to at least it at some step.
pub fn summarize(cfg: &ExperimentConfig, outcomes: &[TrialOutcome]) -> SwitchStats {
    let target = cfg.condition.target_k();
    let rows = cfg
        .variants
        .iter()
        .enumerate()
        .map(|(i, &tag)| {
            let switches = outcomes.iter().filter(|o| o.traces[i].reached_from_below(target)).count();
            let mut stats = VariantStats::from_counts(tag, switches, outcomes.len());
            for o in outcomes {
                *stats.final_k_counts.entry(o.traces[i].final_k()).or_default() += 1;
            }
            stats
        })
        .collect();
    SwitchStats {
        condition: cfg.condition,
        separation: cfg.separation(cfg.condition),
        tau: cfg.tau,
        master_seed: cfg.master_seed,
        rows,
    }
}

pub fn estimate_switch_probability(cfg: &ExperimentConfig, parallelism: usize) -> Result<SwitchStats> {
    Ok(summarize(cfg, &run_trials(cfg, parallelism)?))
}

pub const RESULTS_HEADER: [&str; 9] =
    ["condition", "variant", "n_runs", "switches", "probability", "std_error", "delta", "tau", "master_seed"];

/// Aggregate results, one row per (condition, variant).
pub fn write_results_csv<W: Write>(out: W, stats: &[SwitchStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for s in stats {
        for r in &s.rows {
            w.write_record([
                s.condition.to_string(),
                r.variant.to_string(),
                r.n_runs.to_string(),
                r.switches.to_string(),
                r.probability.to_string(),
                r.std_error.to_string(),
                s.separation.to_string(),
                s.tau.to_string(),
                s.master_seed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-step events of every trial for one variant, one JSON object per line.
pub fn write_trace_jsonl<W: Write>(mut out: W, outcomes: &[TrialOutcome], variant_index: usize) -> Result<()> {
    for o in outcomes {
        for e in &o.traces[variant_index].events {
            let mut e = e.clone();
            e.trial = Some(o.trial);
            serde_json::to_writer(&mut out, &e)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, outcomes: &[TrialOutcome], variant_index: usize) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace_jsonl(file, outcomes, variant_index)
}

/// Grid and tolerances for [`balance_difficulty`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationGrid {
    /// Candidate k2 separations, tried in ascending order when the current one
    /// leaves the oracle below `min_oracle_probability`.
    pub deltas: Vec<f64>,
    /// Candidate k3 separations.
    pub deltas_k3: Vec<f64>,
    pub tolerance: f64,
    pub min_oracle_probability: f64,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        CalibrationGrid {
            deltas: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0],
            deltas_k3: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0],
            tolerance: 0.05,
            min_oracle_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub condition: Condition,
    pub separation: f64,
    pub probability: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub config: ExperimentConfig,
    pub rows: Vec<CalibrationRow>,
}

fn oracle_probability(cfg: &ExperimentConfig, condition: Condition, separation: f64, parallelism: usize) -> Result<CalibrationRow> {
    let mut c = cfg.for_condition(condition);
    c.variants = vec![VariantTag::UL];
    match condition {
        Condition::K2 => c.delta = separation,
        Condition::K3 => c.delta_k3 = Some(separation),
    }
    let stats = estimate_switch_probability(&c, parallelism)?;
    let row = &stats.rows[0];
    Ok(CalibrationRow { condition, separation, probability: row.probability, std_error: row.std_error })
}

/// Choose separations so the oracle's switch probability is about equal on the
/// 1→2 and 2→3 conditions. The k2 gap moves only if the oracle falls below
/// `min_oracle_probability`; the k3 gap is chosen from its grid.
pub fn balance_difficulty(cfg: &ExperimentConfig, grid: &CalibrationGrid, parallelism: usize) -> Result<Calibration> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut out = cfg.clone();

    let mut k2 = oracle_probability(cfg, Condition::K2, cfg.delta, parallelism)?;
    rows.push(k2.clone());
    let k3_now = oracle_probability(cfg, Condition::K3, cfg.separation(Condition::K3), parallelism)?;
    rows.push(k3_now.clone());
    if k2.probability >= grid.min_oracle_probability && (k2.probability - k3_now.probability).abs() <= grid.tolerance {
        return Ok(Calibration { config: out, rows });
    }

    if k2.probability < grid.min_oracle_probability {
        let mut deltas = grid.deltas.clone();
        deltas.sort_by(f64::total_cmp);
        let mut found = None;
        for d in deltas.into_iter().filter(|d| *d > cfg.delta) {
            let row = oracle_probability(cfg, Condition::K2, d, parallelism)?;
            rows.push(row.clone());
            if row.probability >= grid.min_oracle_probability {
                found = Some(row);
                break;
            }
        }
        k2 = found.ok_or_else(|| {
            Error::CalibrationFailed(format!(
                "no k2 separation in {:?} reaches oracle switch probability {}",
                grid.deltas, grid.min_oracle_probability
            ))
        })?;
        out.delta = k2.separation;
    }

    let mut best: Option<CalibrationRow> = None;
    for &d in &grid.deltas_k3 {
        let row = oracle_probability(&out, Condition::K3, d, parallelism)?;
        rows.push(row.clone());
        let gap = (row.probability - k2.probability).abs();
        if best.as_ref().is_none_or(|b| gap < (b.probability - k2.probability).abs()) {
            best = Some(row);
        }
    }
    let best = best.ok_or_else(|| Error::CalibrationFailed("empty k3 grid".into()))?;
    let gap = (best.probability - k2.probability).abs();
    if gap > grid.tolerance {
        let lo = grid.deltas_k3.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grid.deltas_k3.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::CalibrationFailed(format!(
            "best k3 separation {} leaves a gap of {gap:.3} > {} (grid {lo}..{hi})",
            best.separation, grid.tolerance
        )));
    }
    out.delta_k3 = Some(best.separation);
    for r in &rows {
        log::info!("calibration {} separation {} p {:.3}", r.condition, r.separation, r.probability);
    }
    Ok(Calibration { config: out, rows })
}

pub fn write_calibration_csv<W: Write>(out: W, rows: &[CalibrationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["condition", "separation", "probability", "std_error"])?;
    for r in rows {
        w.write_record([r.condition.to_string(), r.separation.to_string(), r.probability.to_string(), r.std_error.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One switch-probability estimate per threshold.
pub fn sweep_tau(cfg: &ExperimentConfig, taus: &[Threshold], parallelism: usize) -> Result<Vec<SwitchStats>> {
    if taus.is_empty() {
        return Err(invalid("tau grid must be nonempty"));
    }
    taus.iter()
        .map(|&tau| estimate_switch_probability(&ExperimentConfig { tau, ..cfg.clone() }, parallelism))
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: W, table: &[SwitchStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "condition", "variant", "n_runs", "switches", "probability", "std_error"])?;
    for s in table {
        for r in &s.rows {
            w.write_record([
                s.tau.to_string(),
                s.condition.to_string(),
                r.variant.to_string(),
                r.n_runs.to_string(),
                r.switches.to_string(),
                r.probability.to_string(),
                r.std_error.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Human-readable comparison table.
pub fn format_table(stats: &[SwitchStats]) -> String {
    let mut s = format!("{:<10} {:<8} {:>8} {:>9} {:>12} {:>9}\n", "condition", "variant", "n_runs", "switches", "probability", "std_err");
    for st in stats {
        for r in &st.rows {
            s.push_str(&format!(
                "{:<10} {:<8} {:>8} {:>9} {:>12.4} {:>9.4}\n",
                format!("{} {}", st.condition, st.condition.transition()),
                r.variant.as_str(),
                r.n_runs,
                r.switches,
                r.probability,
                r.std_error
            ));
        }
    }
    s
}
