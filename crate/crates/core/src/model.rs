//! Model space and the exact, unconstrained Bayesian oracle.
//!
//! A hypothesis is a mixture of `k` Gaussians with fixed uniform weights,
//! known noise variance and a shared Gaussian prior over each component mean.
//! The marginal likelihood sums over every assignment of points to
//! components. Because the components are exchangeable a priori, the k^T
//! labeled assignments collapse onto set partitions with at most `k` blocks,
//! each partition with b blocks carrying k!/(k-b)! labelings. The partition
//! sum is evaluated with a subset dynamic program over bitmasks, which is
//! exact and far cheaper than walking the labeled assignments.
//! [`enumerate_log_mllh`] walks the labeled assignments directly and is kept
//! as an independent check.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussmath::{log_sum_exp, sample_index, LN_2PI};

/// A candidate model: component count plus the fixed quantities it shares
/// with every other candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogHypothesis {
    pub k: usize,
    pub noise_variance: f64,
    pub weights: Vec<f64>,
    pub prior_mean: f64,
    pub prior_variance: f64,
}

impl MogHypothesis {
    pub fn uniform(k: usize, noise_variance: f64, prior_mean: f64, prior_variance: f64) -> Result<Self> {
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        let h = MogHypothesis {
            k,
            noise_variance,
            weights: vec![1.0 / k as f64; k],
            prior_mean,
            prior_variance,
        };
        h.validate()?;
        Ok(h)
    }

    /// Same noise, weighting scheme and prior, different component count.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::uniform(k, self.noise_variance, self.prior_mean, self.prior_variance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(invalid(format!("noise variance must be > 0, got {}", self.noise_variance)));
        }
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(invalid(format!("prior variance must be > 0, got {}", self.prior_variance)));
        }
        if !self.prior_mean.is_finite() {
            return Err(invalid("prior mean must be finite"));
        }
        if self.weights.len() != self.k {
            return Err(invalid("weights length must equal k"));
        }
        let w = 1.0 / self.k as f64;
        if self.weights.iter().any(|x| (x - w).abs() > 1e-12) {
            return Err(invalid("weights must be uniform"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("weights must sum to 1"));
        }
        Ok(())
    }

    fn prior(&self) -> ComponentPrior {
        ComponentPrior {
            noise_variance: self.noise_variance,
            prior_mean: self.prior_mean,
            prior_variance: self.prior_variance,
        }
    }
}

/// Limits on exact evaluation. Work is counted in dynamic-program terms
/// (see [`exact_terms`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExactConfig {
    pub max_points: usize,
    pub term_budget: u64,
}

impl Default for ExactConfig {
    fn default() -> Self {
        ExactConfig { max_points: 14, term_budget: 10_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataOrdering {
    Sampled,
    Ordered,
}

/// Observations in arrival order plus whatever is known about their source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Dataset {
    pub points: Vec<f64>,
    pub ground_truth_k: Option<usize>,
    pub ground_truth_means: Option<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.iter().any(|x| !x.is_finite()) {
            return Err(invalid("dataset points must be finite"));
        }
        Ok(Dataset { points, ..Default::default() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Generating distribution for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub means: Vec<f64>,
    pub noise_variance: f64,
    pub weights: Vec<f64>,
}

impl Generator {
    pub fn uniform(means: Vec<f64>, noise_variance: f64) -> Self {
        let k = means.len();
        Generator { means, noise_variance, weights: vec![1.0 / k as f64; k] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return Err(invalid("generator needs matching nonempty means and weights"));
        }
        if !(self.noise_variance > 0.0) {
            return Err(invalid("generator noise variance must be > 0"));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(invalid("generator weights must be a probability vector"));
        }
        Ok(())
    }
}

/// Draw `length` observations. `Ordered` sorts the component labels before
/// drawing values so each component arrives as one contiguous block.
pub fn generate_dataset<R: Rng + ?Sized>(
    generator: &Generator,
    length: usize,
    ordering: DataOrdering,
    rng: &mut R,
) -> Result<Dataset> {
    generator.validate()?;
    let mut labels: Vec<usize> = (0..length).map(|_| sample_index(&generator.weights, rng)).collect();
    if ordering == DataOrdering::Ordered {
        labels.sort_unstable();
    }
    let sd = generator.noise_variance.sqrt();
    let points = labels
        .iter()
        .map(|&j| {
            let z: f64 = rng.sample(StandardNormal);
            generator.means[j] + sd * z
        })
        .collect();
    Ok(Dataset {
        points,
        ground_truth_k: Some(generator.means.len()),
        ground_truth_means: Some(generator.means.clone()),
        labels: Some(labels),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ComponentPrior {
    noise_variance: f64,
    prior_mean: f64,
    prior_variance: f64,
}

impl ComponentPrior {
    /// log marginal of a block of `n` points with sum `s` and sum of squares `q`.
    fn block_log_marginal(&self, n: usize, s: f64, q: f64) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let (nv, m0, v0) = (self.noise_variance, self.prior_mean, self.prior_variance);
        let nf = n as f64;
        let precision = 1.0 / v0 + nf / nv;
        let lin = m0 / v0 + s / nv;
        -0.5 * nf * (LN_2PI + nv.ln()) - 0.5 * (1.0 + nf * v0 / nv).ln() - q / (2.0 * nv) - m0 * m0 / (2.0 * v0)
            + lin * lin / (2.0 * precision)
    }
}

/// Work units the subset program spends on `n` points and up to `kmax` blocks.
pub fn exact_terms(n: usize, kmax: usize) -> u64 {
    if n == 0 {
        return 0;
    }
    let levels = kmax.min(n) as u64;
    let half = 1u64 << (n - 1);
    let inner = (3u64.pow((n - 1) as u32) + 1) / 2;
    (1u64 << n) + levels.saturating_sub(2) * inner + levels * half
}

fn check_caps(n: usize, kmax: usize, cfg: &ExactConfig) -> Result<()> {
    if n > cfg.max_points {
        return Err(Error::CapExceeded(format!(
            "{n} points exceed the exact-evaluation cap of {}",
            cfg.max_points
        )));
    }
    // 3^(n-1) overflows u64 only far beyond any sane cap
    if n > 40 {
        return Err(Error::CapExceeded(format!("{n} points is beyond exact evaluation")));
    }
    let terms = exact_terms(n, kmax);
    if terms > cfg.term_budget {
        return Err(Error::CapExceeded(format!(
            "{terms} terms for {n} points and k <= {kmax} exceed the budget of {}",
            cfg.term_budget
        )));
    }
    Ok(())
}

/// Log marginal likelihood of `points` under uniform-weight mixtures with
/// k = 1..=kmax components sharing `hyp`'s noise and prior. Entry `k-1`
/// holds log P(D | k).
pub fn exact_log_mllh_by_k(points: &[f64], hyp: &MogHypothesis, kmax: usize, cfg: &ExactConfig) -> Result<Vec<f64>> {
    hyp.validate()?;
    if kmax == 0 {
        return Err(invalid("kmax must be >= 1"));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(invalid("points must be finite"));
    }
    let n = points.len();
    if n == 0 {
        return Ok(vec![0.0; kmax]);
    }
    check_caps(n, kmax, cfg)?;
    let prior = hyp.prior();
    let levels = kmax.min(n);
    let block = block_table(points, &prior);

    let scale = 0.5 * (LN_2PI + prior.noise_variance.ln());
    let partition_sums = match linear_partition_sums(&block, n, levels, scale) {
        Some(p) => p,
        None => log_partition_sums(&block, n, levels),
    };
    Ok(combine_levels(&partition_sums, n, kmax))
}

/// log P(D | m) for a single hypothesis.
pub fn exact_log_mllh(points: &[f64], hyp: &MogHypothesis, cfg: &ExactConfig) -> Result<f64> {
    Ok(*exact_log_mllh_by_k(points, hyp, hyp.k, cfg)?.last().expect("kmax >= 1"))
}

/// log P(x | D, m) = log P(D ∪ {x} | m) - log P(D | m).
pub fn exact_predictive_log_pdf(points: &[f64], hyp: &MogHypothesis, x: f64, cfg: &ExactConfig) -> Result<f64> {
    let mut extended = points.to_vec();
    extended.push(x);
    Ok(exact_log_mllh(&extended, hyp, cfg)? - exact_log_mllh(points, hyp, cfg)?)
}

/// Exact log evidence for each hypothesis. Hypotheses sharing noise and
/// prior are served by a single pass of the subset program.
pub fn exact_log_mllh_many(points: &[f64], hyps: &[MogHypothesis], cfg: &ExactConfig) -> Result<Vec<f64>> {
    let mut log_ev = vec![0.0; hyps.len()];
    let mut done = vec![false; hyps.len()];
    for i in 0..hyps.len() {
        if done[i] {
            continue;
        }
        let prior = hyps[i].prior();
        let group: Vec<usize> = (i..hyps.len()).filter(|&j| !done[j] && hyps[j].prior() == prior).collect();
        let kmax = group.iter().map(|&j| hyps[j].k).max().unwrap_or(1);
        let by_k = exact_log_mllh_by_k(points, &hyps[i], kmax, cfg)?;
        for j in group {
            log_ev[j] = by_k[hyps[j].k - 1];
            done[j] = true;
        }
    }
    Ok(log_ev)
}

/// Normalized log posteriors over `model_space` under a uniform model prior.
pub fn batch_model_posterior(
    points: &[f64],
    model_space: &[MogHypothesis],
    cfg: &ExactConfig,
) -> Result<Vec<(MogHypothesis, f64)>> {
    if model_space.is_empty() {
        return Err(invalid("model space must be nonempty"));
    }
    let log_ev = exact_log_mllh_many(points, model_space, cfg)?;
    let norm = log_sum_exp(&log_ev);
    Ok(model_space.iter().cloned().zip(log_ev.into_iter().map(|l| l - norm)).collect())
}

/// Index of the highest posterior; ties go to the smaller k, then the earlier entry.
pub fn map_index(posterior: &[(MogHypothesis, f64)]) -> usize {
    let mut best = 0;
    for (i, (h, lp)) in posterior.iter().enumerate().skip(1) {
        let (bh, blp) = &posterior[best];
        if *lp > *blp || (*lp == *blp && h.k < bh.k) {
            best = i;
        }
    }
    best
}

/// log M(S) for every subset S of the points, indexed by bitmask.
fn block_table(points: &[f64], prior: &ComponentPrior) -> Vec<f64> {
    let n = points.len();
    let size = 1usize << n;
    let mut count = vec![0usize; size];
    let mut sum = vec![0.0; size];
    let mut sq = vec![0.0; size];
    let mut log_m = vec![0.0; size];
    for mask in 1..size {
        let i = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        count[mask] = count[rest] + 1;
        sum[mask] = sum[rest] + points[i];
        sq[mask] = sq[rest] + points[i] * points[i];
        log_m[mask] = prior.block_log_marginal(count[mask], sum[mask], sq[mask]);
    }
    log_m
}

/// Partition sums P_b, b = 1..=levels, as logs. Runs in the linear domain with
/// every block scaled by (2πσ²)^{n/2}, which bounds each scaled block by 1.
/// Returns `None` if any level underflows.
fn linear_partition_sums(log_m: &[f64], n: usize, levels: usize, scale: f64) -> Option<Vec<f64>> {
    let size = 1usize << n;
    let scaled: Vec<f64> = (0..size)
        .map(|mask| (log_m[mask] + scale * mask.count_ones() as f64).exp())
        .collect();

    let full = size - 1;
    let mut out = Vec::with_capacity(levels);
    out.push(scaled[full]);

    if levels >= 2 {
        // Intermediate levels only ever see masks without point 0.
        let half = size >> 1;
        let mut prev: Vec<f64> = (0..half).map(|u| if u == 0 { 0.0 } else { scaled[u << 1] }).collect();
        for level in 2..=levels {
            // top level for this b: P_b = Σ_{S ∋ 0} M(S) F_{b-1}(full \ S)
            let rest = full >> 1;
            let mut total = 0.0;
            let mut sub = rest;
            loop {
                let comp = rest ^ sub;
                if comp != 0 {
                    total += scaled[(sub << 1) | 1] * prev[comp];
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & rest;
            }
            out.push(total);
            if level == levels {
                break;
            }
            let mut next = vec![0.0; half];
            for u in 1..half {
                let low = u & u.wrapping_neg();
                let rest_u = u ^ low;
                let mut acc = 0.0;
                let mut sub = rest_u;
                while sub != 0 {
                    // S = low | (rest_u ^ sub) keeps the lowest point, remainder is sub
                    acc += scaled[(low | (rest_u ^ sub)) << 1] * prev[sub];
                    sub = (sub - 1) & rest_u;
                }
                next[u] = acc;
            }
            prev = next;
        }
    }

    let correction = scale * n as f64;
    if out.iter().any(|p| !(*p > 1e-280) || !p.is_finite()) {
        return None;
    }
    Some(out.into_iter().map(|p| p.ln() - correction).collect())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-domain twin of [`linear_partition_sums`] for data that underflows.
fn log_partition_sums(log_m: &[f64], n: usize, levels: usize) -> Vec<f64> {
    let size = 1usize << n;
    let full = size - 1;
    let half = size >> 1;
    let mut out = vec![log_m[full]];
    if levels >= 2 {
        let mut prev: Vec<f64> = (0..half)
            .map(|u| if u == 0 { f64::NEG_INFINITY } else { log_m[u << 1] })
            .collect();
        for level in 2..=levels {
            let rest = full >> 1;
            let mut total = f64::NEG_INFINITY;
            let mut sub = rest;
            loop {
                let comp = rest ^ sub;
                if comp != 0 {
                    total = log_add(total, log_m[(sub << 1) | 1] + prev[comp]);
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & rest;
            }
            out.push(total);
            if level == levels {
                break;
            }
            let mut next = vec![f64::NEG_INFINITY; half];
            for u in 1..half {
                let low = u & u.wrapping_neg();
                let rest_u = u ^ low;
                let mut acc = f64::NEG_INFINITY;
                let mut sub = rest_u;
                while sub != 0 {
                    acc = log_add(acc, log_m[(low | (rest_u ^ sub)) << 1] + prev[sub]);
                    sub = (sub - 1) & rest_u;
                }
                next[u] = acc;
            }
            prev = next;
        }
    }
    out
}

/// log P(D|k) = log Σ_b k!/(k-b)! k^{-n} P_b for k = 1..=kmax.
fn combine_levels(log_p: &[f64], n: usize, kmax: usize) -> Vec<f64> {
    (1..=kmax)
        .map(|k| {
            let kf = k as f64;
            let mut log_falling = 0.0;
            let terms: Vec<f64> = (1..=k.min(log_p.len()))
                .map(|b| {
                    log_falling += (kf - (b - 1) as f64).ln();
                    log_falling - n as f64 * kf.ln() + log_p[b - 1]
                })
                .collect();
            log_sum_exp(&terms)
        })
        .collect()
}

/// Direct enumeration of all k^T labeled assignments. Exponential; meant as
/// an oracle for small inputs. Fails if k^T exceeds `term_budget`.
pub fn enumerate_log_mllh(points: &[f64], hyp: &MogHypothesis, term_budget: u64) -> Result<f64> {
    hyp.validate()?;
    let n = points.len();
    let k = hyp.k;
    let terms = (k as f64).powi(n as i32);
    if terms > term_budget as f64 {
        return Err(Error::CapExceeded(format!("{k}^{n} assignments exceed the budget of {term_budget}")));
    }
    let prior = hyp.prior();
    let log_w = -(k as f64).ln();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k];
    let mut sqs = vec![0.0; k];
    let mut leaves = Vec::with_capacity(terms as usize);
    fn walk(
        i: usize,
        points: &[f64],
        prior: &ComponentPrior,
        counts: &mut [usize],
        sums: &mut [f64],
        sqs: &mut [f64],
        leaves: &mut Vec<f64>,
    ) {
        if i == points.len() {
            let ll: f64 = (0..counts.len()).map(|j| prior.block_log_marginal(counts[j], sums[j], sqs[j])).sum();
            leaves.push(ll);
            return;
        }
        let x = points[i];
        for j in 0..counts.len() {
            counts[j] += 1;
            sums[j] += x;
            sqs[j] += x * x;
            walk(i + 1, points, prior, counts, sums, sqs, leaves);
            counts[j] -= 1;
            sums[j] -= x;
            sqs[j] -= x * x;
        }
    }
    walk(0, points, &prior, &mut counts, &mut sums, &mut sqs, &mut leaves);
    Ok(n as f64 * log_w + log_sum_exp(&leaves))
}

/// Generator metadata written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub true_means: Vec<f64>,
    pub noise_variance: f64,
    pub weights: Vec<f64>,
    pub ordering: DataOrdering,
    pub seed: u64,
}

/// Sidecar path: `data.txt` → `data.txt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_dataset(path: &Path, data: &Dataset, meta: Option<&DatasetMeta>) -> Result<()> {
    let mut text = String::new();
    for x in &data.points {
        text.push_str(&format!("{x}\n"));
    }
    fs::write(path, text)?;
    if let Some(meta) = meta {
        fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    }
    Ok(())
}

/// One decimal observation per line; blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let x: f64 = line
            .parse()
            .map_err(|_| invalid(format!("{}:{}: not a number: {line:?}", path.display(), lineno + 1)))?;
        points.push(x);
    }
    Dataset::from_points(points)
}
