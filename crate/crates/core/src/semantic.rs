//! The memory-constrained learner: one tracked model, a factorized Gaussian
//! posterior over its component means, and the machinery to compare it with
//! and hand its knowledge over to models it is not tracking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gaussmath::{
    conjugate_update, log_mean_exp, log_sum_exp, mixture_log_pdf, normal_log_pdf, sample_mixture, GaussianBelief,
    MixtureDensity, LN_2PI, VARIANCE_FLOOR,
};
use crate::model::{exact_log_mllh_many, ExactConfig, MogHypothesis};

/// Tracked model plus one belief per component mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub hypothesis: MogHypothesis,
    pub beliefs: Vec<GaussianBelief>,
    /// Number of observations assimilated so far.
    pub t: usize,
}

impl PosteriorState {
    /// Every component starts at the prior N(m₀, v₀).
    pub fn init(hypothesis: MogHypothesis) -> Result<Self> {
        hypothesis.validate()?;
        let prior = GaussianBelief::new(hypothesis.prior_mean, hypothesis.prior_variance)?;
        Ok(PosteriorState { beliefs: vec![prior; hypothesis.k], hypothesis, t: 0 })
    }

    /// Build a state from explicit beliefs, e.g. to start from a pre-trained model.
    pub fn from_beliefs(hypothesis: MogHypothesis, beliefs: Vec<GaussianBelief>, t: usize) -> Result<Self> {
        let state = PosteriorState { hypothesis, beliefs, t };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        self.hypothesis.validate()?;
        if self.beliefs.len() != self.hypothesis.k {
            return Err(invalid(format!(
                "state has {} beliefs for k = {}",
                self.beliefs.len(),
                self.hypothesis.k
            )));
        }
        self.beliefs.iter().try_for_each(GaussianBelief::validate)
    }

    pub fn k(&self) -> usize {
        self.hypothesis.k
    }

    /// r_j ∝ w_j N(x; mean_j, var_j + σ²), normalized.
    pub fn responsibilities(&self, x: f64) -> Vec<f64> {
        let noise = self.hypothesis.noise_variance;
        let logs: Vec<f64> = self
            .beliefs
            .iter()
            .zip(&self.hypothesis.weights)
            .map(|(b, w)| w.ln() + normal_log_pdf(x, b.mean, b.variance + noise))
            .collect();
        let norm = log_sum_exp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }

    /// One assumed-density step: each component takes a responsibility-weighted
    /// conjugate update, projected back to a single Gaussian.
    pub fn assimilate(&self, x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(invalid("observation must be finite"));
        }
        let resp = self.responsibilities(x);
        let noise = self.hypothesis.noise_variance;
        let beliefs = self
            .beliefs
            .iter()
            .zip(resp)
            .map(|(b, r)| conjugate_update(*b, x, noise, r.clamp(0.0, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PosteriorState { hypothesis: self.hypothesis.clone(), beliefs, t: self.t + 1 })
    }

    pub fn assimilate_all(&self, xs: &[f64]) -> Result<Self> {
        xs.iter().try_fold(self.clone(), |s, &x| s.assimilate(x))
    }

    /// Predictive distribution of the next observation.
    pub fn predictive(&self) -> MixtureDensity {
        let noise = self.hypothesis.noise_variance;
        MixtureDensity::new(
            self.hypothesis.weights.clone(),
            self.beliefs.iter().map(|b| b.mean).collect(),
            self.beliefs.iter().map(|b| b.variance + noise).collect(),
        )
        .expect("a valid state has a valid predictive")
    }
}

/// Knobs of model comparison and knowledge transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwitchConfig {
    /// Fake datasets drawn per evidence estimate.
    pub fake_dataset_count: usize,
    /// Upper bound on fake plus real points per evidence evaluation.
    pub fake_size_cap: usize,
    pub em_sample_count: usize,
    pub em_restarts: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
    /// Required log-evidence lead of a challenger over the incumbent.
    pub switch_margin: f64,
    pub candidate_ks: Vec<usize>,
    pub exact: ExactConfig,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        SwitchConfig {
            fake_dataset_count: 64,
            fake_size_cap: 12,
            em_sample_count: 2000,
            em_restarts: 4,
            em_max_iters: 200,
            em_tol: 1e-8,
            switch_margin: 0.0,
            candidate_ks: vec![1, 2, 3, 4],
            exact: ExactConfig::default(),
        }
    }
}

impl SwitchConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("fake_dataset_count", self.fake_dataset_count),
            ("fake_size_cap", self.fake_size_cap),
            ("em_sample_count", self.em_sample_count),
            ("em_restarts", self.em_restarts),
            ("em_max_iters", self.em_max_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.em_tol > 0.0) {
            return Err(invalid("em_tol must be > 0"));
        }
        if !(self.switch_margin >= 0.0) {
            return Err(invalid("switch_margin must be >= 0"));
        }
        if self.candidate_ks.iter().any(|&k| k == 0) {
            return Err(invalid("candidate k must be >= 1"));
        }
        Ok(())
    }
}

/// Outcome of fitting a new model's predictive to the old one's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Mean per-sample log-likelihood of the winning restart.
    pub log_likelihood: f64,
    /// Every restart pushed some predictive variance onto the σ² floor.
    pub degenerate: bool,
}

struct EmFit {
    means: Vec<f64>,
    variances: Vec<f64>,
    log_likelihood: f64,
    clamped: bool,
}

/// Fixed uniform-weight mixture fit with every variance held ≥ `min_variance`.
fn em_fit(samples: &[f64], init_means: Vec<f64>, init_var: f64, min_variance: f64, cfg: &SwitchConfig) -> EmFit {
    let k = init_means.len();
    let n = samples.len();
    let log_w = -(k as f64).ln();
    let mut means = init_means;
    let mut variances = vec![init_var.max(min_variance); k];
    let mut resp = vec![0.0; n * k];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    let mut terms = vec![0.0; k];

    let mut offset = vec![0.0; k];
    let mut inv2 = vec![0.0; k];
    for _ in 0..cfg.em_max_iters {
        for j in 0..k {
            offset[j] = log_w - 0.5 * (LN_2PI + variances[j].ln());
            inv2[j] = 0.5 / variances[j];
        }
        let mut total = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let mut top = f64::NEG_INFINITY;
            for j in 0..k {
                let d = x - means[j];
                terms[j] = offset[j] - d * d * inv2[j];
                top = top.max(terms[j]);
            }
            let mut acc = 0.0;
            for j in 0..k {
                terms[j] = (terms[j] - top).exp();
                acc += terms[j];
            }
            total += top + acc.ln();
            for j in 0..k {
                resp[i * k + j] = terms[j] / acc;
            }
        }
        ll = total / n as f64;
        if (ll - prev_ll).abs() < cfg.em_tol {
            break;
        }
        prev_ll = ll;

        for j in 0..k {
            let weight: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if weight < 1e-12 {
                continue;
            }
            let mean = (0..n).map(|i| resp[i * k + j] * samples[i]).sum::<f64>() / weight;
            let var = (0..n).map(|i| resp[i * k + j] * (samples[i] - mean).powi(2)).sum::<f64>() / weight;
            means[j] = mean;
            variances[j] = var.max(min_variance);
        }
    }
    let clamped = variances.iter().any(|v| *v <= min_variance);
    EmFit { means, variances, log_likelihood: ll, clamped }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Hand the old model's knowledge to `target` by fitting the target's
/// predictive to samples of the old predictive. Maximizing the sample
/// log-likelihood minimizes KL(old predictive ‖ new predictive) against the
/// empirical distribution. Weights stay uniform; `t` carries over.
pub fn transfer_posterior<R: Rng + ?Sized>(
    old: &PosteriorState,
    target: &MogHypothesis,
    cfg: &SwitchConfig,
    rng: &mut R,
) -> Result<(PosteriorState, TransferReport)> {
    old.validate()?;
    target.validate()?;
    cfg.validate()?;
    let noise = target.noise_variance;
    let samples = sample_mixture(&old.predictive(), cfg.em_sample_count, rng);
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let k = target.k;
    let min_variance = noise + VARIANCE_FLOOR;

    let mut best: Option<EmFit> = None;
    let mut all_clamped = true;
    for restart in 0..cfg.em_restarts {
        let init: Vec<f64> = if restart == 0 {
            (0..k).map(|j| quantile(&sorted, (j as f64 + 0.5) / k as f64)).collect()
        } else {
            let mut qs: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            qs.sort_by(f64::total_cmp);
            qs.into_iter().map(|q| quantile(&sorted, q)).collect()
        };
        let fit = em_fit(&samples, init, var, min_variance, cfg);
        all_clamped &= fit.clamped;
        // strict improvement keeps the earliest restart on ties
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    let best = best.expect("em_restarts >= 1");
    if all_clamped {
        log::warn!("transfer to k = {k}: every restart hit the predictive variance floor");
    }

    let mut beliefs: Vec<GaussianBelief> = best
        .means
        .iter()
        .zip(&best.variances)
        .map(|(m, v)| GaussianBelief { mean: *m, variance: (v - noise).max(VARIANCE_FLOOR) })
        .collect();
    beliefs.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    let state = PosteriorState::from_beliefs(target.clone(), beliefs, old.t)?;
    Ok((state, TransferReport { log_likelihood: best.log_likelihood, degenerate: all_clamped }))
}

fn fake_size(state: &PosteriorState, real_points: &[f64], cfg: &SwitchConfig) -> usize {
    state.t.min(cfg.fake_size_cap.saturating_sub(real_points.len()))
}

/// Estimated log evidence of each candidate: log of the average, over fake
/// datasets drawn from the tracked predictive, of the exact marginal
/// likelihood of fake ∪ real data. All candidates are scored on the same
/// fake datasets.
pub fn approx_log_evidences<R: Rng + ?Sized>(
    state: &PosteriorState,
    candidates: &[MogHypothesis],
    real_points: &[f64],
    cfg: &SwitchConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    state.validate()?;
    cfg.validate()?;
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let n_fake = fake_size(state, real_points, cfg);
    let predictive = state.predictive();
    let reps = if n_fake == 0 { 1 } else { cfg.fake_dataset_count };
    let mut per_candidate = vec![Vec::with_capacity(reps); candidates.len()];
    let mut data = Vec::with_capacity(n_fake + real_points.len());
    for _ in 0..reps {
        data.clear();
        data.extend(sample_mixture(&predictive, n_fake, rng));
        data.extend_from_slice(real_points);
        let ev = exact_log_mllh_many(&data, candidates, &cfg.exact)?;
        for (acc, v) in per_candidate.iter_mut().zip(ev) {
            acc.push(v);
        }
    }
    Ok(per_candidate.iter().map(|v| log_mean_exp(v)).collect())
}

/// Single-candidate form of [`approx_log_evidences`].
pub fn approx_log_evidence<R: Rng + ?Sized>(
    state: &PosteriorState,
    candidate: &MogHypothesis,
    real_points: &[f64],
    cfg: &SwitchConfig,
    rng: &mut R,
) -> Result<f64> {
    Ok(approx_log_evidences(state, std::slice::from_ref(candidate), real_points, cfg, rng)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvidence {
    pub k: usize,
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub incumbent_k: usize,
    pub winner_k: usize,
    pub switched: bool,
    pub candidate_evidences: Vec<CandidateEvidence>,
    /// Set when the transfer fit hit the variance floor on every restart.
    pub degenerate_fit: bool,
}

/// Compare the tracked model against every candidate size and switch if a
/// challenger leads by more than the margin. On a switch the new state is the
/// transferred posterior with `real_points` assimilated in order.
pub fn maybe_switch<R: Rng + ?Sized>(
    state: &PosteriorState,
    real_points: &[f64],
    cfg: &SwitchConfig,
    rng: &mut R,
) -> Result<(PosteriorState, SwitchDecision)> {
    let incumbent = state.k();
    let mut ks = cfg.candidate_ks.clone();
    ks.push(incumbent);
    ks.sort_unstable();
    ks.dedup();
    let hyps = ks.iter().map(|&k| state.hypothesis.with_k(k)).collect::<Result<Vec<_>>>()?;
    let evidences = approx_log_evidences(state, &hyps, real_points, cfg, rng)?;

    let inc_idx = ks.iter().position(|&k| k == incumbent).expect("incumbent is a candidate");
    let mut best = inc_idx;
    for (i, ev) in evidences.iter().enumerate() {
        // ks is ascending, so strict > keeps the lowest k among equal challengers
        if *ev > evidences[best] {
            best = i;
        }
    }
    let candidate_evidences = ks
        .iter()
        .zip(&evidences)
        .map(|(&k, &log_evidence)| CandidateEvidence { k, log_evidence })
        .collect();

    let switch = best != inc_idx && evidences[best] > evidences[inc_idx] + cfg.switch_margin;
    if !switch {
        let decision = SwitchDecision {
            incumbent_k: incumbent,
            winner_k: incumbent,
            switched: false,
            candidate_evidences,
            degenerate_fit: false,
        };
        return Ok((state.clone(), decision));
    }
    let (transferred, report) = transfer_posterior(state, &hyps[best], cfg, rng)?;
    let next = transferred.assimilate_all(real_points)?;
    let decision = SwitchDecision {
        incumbent_k: incumbent,
        winner_k: ks[best],
        switched: true,
        candidate_evidences,
        degenerate_fit: report.degenerate,
    };
    Ok((next, decision))
}

/// Monte Carlo estimate of KL(p ‖ q) from `n` draws of p.
pub fn monte_carlo_kl<R: Rng + ?Sized>(p: &MixtureDensity, q: &MixtureDensity, n: usize, rng: &mut R) -> f64 {
    let xs = sample_mixture(p, n, rng);
    xs.iter().map(|&x| mixture_log_pdf(p, x) - mixture_log_pdf(q, x)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::exact_predictive_log_pdf;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyp(k: usize) -> MogHypothesis {
        MogHypothesis::uniform(k, 1.0, 0.0, 1.0).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_examples() {
        let s = PosteriorState::init(hyp(1)).unwrap();
        assert_eq!(s.beliefs, vec![GaussianBelief { mean: 0.0, variance: 1.0 }]);
        assert_eq!(s.t, 0);
        let s = PosteriorState::init(hyp(3)).unwrap();
        assert_eq!(s.beliefs.len(), 3);
        assert!(s.beliefs.windows(2).all(|w| w[0] == w[1]));
        let p = s.predictive();
        assert!(p.variances().iter().all(|v| *v == 2.0));
        assert!(p.means().iter().all(|m| *m == 0.0));
    }

    #[test]
    fn assimilate_examples() {
        let s = PosteriorState::init(hyp(1)).unwrap().assimilate(2.0).unwrap();
        assert_abs_diff_eq!(s.beliefs[0].mean, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beliefs[0].variance, 0.5, epsilon = 1e-15);
        assert_eq!(s.t, 1);

        let h = hyp(2);
        let sym = PosteriorState::from_beliefs(
            h.clone(),
            vec![GaussianBelief { mean: -1.5, variance: 0.4 }, GaussianBelief { mean: 1.5, variance: 0.4 }],
            3,
        )
        .unwrap();
        let r = sym.responsibilities(0.0);
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-15);
        let next = sym.assimilate(0.0).unwrap();
        assert!(next.beliefs[0].mean > -1.5);
        assert_abs_diff_eq!(next.beliefs[0].mean, -next.beliefs[1].mean, epsilon = 1e-15);

        let far = PosteriorState::from_beliefs(
            h,
            vec![GaussianBelief { mean: 0.0, variance: 0.1 }, GaussianBelief { mean: 100.0, variance: 0.1 }],
            0,
        )
        .unwrap();
        let r = far.responsibilities(0.0);
        assert!(r[0] > 1.0 - 1e-12);
        let next = far.assimilate(0.0).unwrap();
        assert!((next.beliefs[1].mean - 100.0).abs() < 1e-6);
    }

    #[test]
    fn predictive_examples() {
        let s = PosteriorState::init(hyp(1)).unwrap();
        let p = s.predictive();
        assert_abs_diff_eq!(mixture_log_pdf(&p, 0.0).exp(), 0.282_094_791_773_878_14, epsilon = 1e-12);

        // k = 1 assumed-density filtering is exact
        let x = 1.3;
        let after = s.assimilate(x).unwrap().predictive();
        let cfg = ExactConfig::default();
        for y in [-3.0, -0.5, 0.0, 1.3, 4.0] {
            let exact = exact_predictive_log_pdf(&[x], &hyp(1), y, &cfg).unwrap();
            assert_abs_diff_eq!(mixture_log_pdf(&after, y), exact, epsilon = 1e-10);
        }
    }

    #[test]
    fn transfer_identity_target() {
        let h = hyp(2);
        let old = PosteriorState::from_beliefs(
            h.clone(),
            vec![GaussianBelief { mean: -2.0, variance: 0.3 }, GaussianBelief { mean: 2.0, variance: 0.2 }],
            6,
        )
        .unwrap();
        let mut r = rng(4);
        let (new, report) = transfer_posterior(&old, &h, &SwitchConfig::default(), &mut r).unwrap();
        assert_eq!(new.t, 6);
        assert!(!report.degenerate);
        let kl = monte_carlo_kl(&old.predictive(), &new.predictive(), 100_000, &mut r);
        assert!(kl <= 0.02, "kl {kl}");
    }

    #[test]
    fn transfer_one_to_two() {
        let old = PosteriorState::init(hyp(1)).unwrap();
        let mut r = rng(5);
        let (new, _) = transfer_posterior(&old, &hyp(2), &SwitchConfig::default(), &mut r).unwrap();
        assert_eq!(new.k(), 2);
        let kl = monte_carlo_kl(&old.predictive(), &new.predictive(), 100_000, &mut r);
        assert!(kl <= 0.05, "kl {kl}");
    }

    #[test]
    fn transfer_two_to_one_moment_matches() {
        let old = PosteriorState::from_beliefs(
            hyp(2),
            vec![GaussianBelief { mean: -3.0, variance: 0.5 }, GaussianBelief { mean: 3.0, variance: 0.5 }],
            8,
        )
        .unwrap();
        let (_, var) = old.predictive().moments();
        let (new, _) = transfer_posterior(&old, &hyp(1), &SwitchConfig::default(), &mut rng(6)).unwrap();
        let p = new.predictive();
        // moment match of ±3 with variance 1.5 is N(0, 10.5)
        assert!(p.means()[0].abs() < 0.3, "{:?}", p);
        assert!((p.variances()[0] - var).abs() / var < 0.1, "{:?}", p);
    }

    #[test]
    fn transfer_flags_collapse() {
        // a tight k=1 predictive cannot be covered by two components with variance >= σ² without clamping
        let old = PosteriorState::from_beliefs(hyp(1), vec![GaussianBelief { mean: 0.0, variance: 0.01 }], 20).unwrap();
        let (new, report) = transfer_posterior(&old, &hyp(2), &SwitchConfig::default(), &mut rng(8)).unwrap();
        assert!(report.degenerate);
        assert!(new.beliefs.iter().all(|b| b.variance >= VARIANCE_FLOOR));
    }

    #[test]
    fn evidence_of_nothing_is_zero() {
        let s = PosteriorState::init(hyp(1)).unwrap();
        for k in 1..4 {
            let ev = approx_log_evidence(&s, &hyp(k), &[], &SwitchConfig::default(), &mut rng(1)).unwrap();
            assert_eq!(ev, 0.0);
        }
    }

    #[test]
    fn evidence_self_consistent() {
        let s = PosteriorState::init(hyp(1)).unwrap().assimilate_all(&[0.3, -0.6, 1.1, 0.2]).unwrap();
        let small = SwitchConfig { fake_dataset_count: 400, ..Default::default() };
        let big = SwitchConfig { fake_dataset_count: 4000, ..Default::default() };
        let real = [0.5];
        // standard error from the spread of the single-dataset values
        let mut r = rng(2);
        let singles: Vec<f64> = (0..400)
            .map(|_| approx_log_evidence(&s, &hyp(1), &real, &SwitchConfig { fake_dataset_count: 1, ..Default::default() }, &mut r).unwrap().exp())
            .collect();
        let mean = singles.iter().sum::<f64>() / 400.0;
        let sd = (singles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
        let se = sd / 400f64.sqrt();
        let a = approx_log_evidence(&s, &hyp(1), &real, &small, &mut rng(10)).unwrap().exp();
        let b = approx_log_evidence(&s, &hyp(1), &real, &big, &mut rng(11)).unwrap().exp();
        assert!((a - b).abs() <= 2.0 * se * (1.0 + 0.1f64.sqrt()), "a {a} b {b} se {se}");
    }

    #[test]
    fn evidence_exchangeable_in_real_points() {
        let s = PosteriorState::init(hyp(1)).unwrap().assimilate_all(&[0.3, -0.6]).unwrap();
        let cfg = SwitchConfig::default();
        let a = approx_log_evidence(&s, &hyp(2), &[1.0, -2.0, 0.4], &cfg, &mut rng(3)).unwrap();
        let b = approx_log_evidence(&s, &hyp(2), &[0.4, 1.0, -2.0], &cfg, &mut rng(3)).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn occam_on_unimodal_state() {
        let cfg = SwitchConfig::default();
        let mut wins = 0;
        for seed in 0..100 {
            let mut r = rng(100 + seed);
            let data = sample_mixture(&MixtureDensity::single(0.0, 1.0).unwrap(), 6, &mut r);
            let s = PosteriorState::init(hyp(1)).unwrap().assimilate_all(&data).unwrap();
            let ev = approx_log_evidences(&s, &[hyp(1), hyp(2)], &[], &cfg, &mut r).unwrap();
            if ev[0] > ev[1] {
                wins += 1;
            }
        }
        assert!(wins >= 90, "k=1 preferred in {wins}/100");
    }

    #[test]
    fn incumbent_wins_ties() {
        let s = PosteriorState::init(hyp(2)).unwrap().assimilate_all(&[0.1, 0.2]).unwrap();
        let cfg = SwitchConfig { candidate_ks: vec![2], ..Default::default() };
        let (next, d) = maybe_switch(&s, &[0.3], &cfg, &mut rng(1)).unwrap();
        assert!(!d.switched);
        assert_eq!(d.candidate_evidences.len(), 1);
        assert_eq!(next, s);

        let cfg = SwitchConfig { candidate_ks: vec![], ..Default::default() };
        let (_, d) = maybe_switch(&s, &[0.3], &cfg, &mut rng(1)).unwrap();
        assert_eq!(d.candidate_evidences.len(), 1);
        assert_eq!(d.winner_k, 2);

        // t = 0 and a single real point: every k has the same evidence
        let fresh = PosteriorState::init(hyp(1)).unwrap();
        let (_, d) = maybe_switch(&fresh, &[5.0], &SwitchConfig::default(), &mut rng(1)).unwrap();
        assert!(!d.switched);
    }

    #[test]
    fn incompatible_points_force_switch() {
        // the experiment harness's default prior
        let hyp = MogHypothesis::uniform(1, 1.0, 0.0, 400.0).unwrap();
        let cfg = SwitchConfig::default();
        let mut switches = 0;
        for seed in 0..100 {
            let mut r = rng(500 + seed);
            let left = sample_mixture(&MixtureDensity::single(-2.0, 1.0).unwrap(), 6, &mut r);
            let s = PosteriorState::init(hyp.clone()).unwrap().assimilate_all(&left).unwrap();
            let (next, d) = maybe_switch(&s, &[2.0, 2.0], &cfg, &mut r).unwrap();
            if d.switched && d.winner_k == 2 {
                switches += 1;
                assert_eq!(next.k(), 2);
                assert_eq!(next.t, s.t + 2);
            }
        }
        assert!(switches > 50, "switched in {switches}/100");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // For k = 1 the online posterior equals the batch posterior in any order.
        #[test]
        fn k1_order_free(pts in prop::collection::vec(-6.0..6.0f64, 1..13), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let h = MogHypothesis::uniform(1, 0.7, 0.4, 2.0).unwrap();
            let mut shuffled = pts.clone();
            shuffled.shuffle(&mut rng(seed));
            let s = PosteriorState::init(h.clone()).unwrap().assimilate_all(&shuffled).unwrap();
            let precision = 1.0 / h.prior_variance + pts.len() as f64 / h.noise_variance;
            let var = 1.0 / precision;
            let mean = var * (h.prior_mean / h.prior_variance + pts.iter().sum::<f64>() / h.noise_variance);
            prop_assert!((s.beliefs[0].mean - mean).abs() < 1e-12);
            prop_assert!((s.beliefs[0].variance - var).abs() < 1e-12);
        }

        #[test]
        fn responsibilities_normalized(m1 in -10.0..10.0f64, m2 in -10.0..10.0f64, m3 in -10.0..10.0f64,
                                       v in 0.01..5.0f64, x in -40.0..40.0f64) {
            let s = PosteriorState::from_beliefs(
                hyp(3),
                vec![
                    GaussianBelief { mean: m1, variance: v },
                    GaussianBelief { mean: m2, variance: v * 2.0 },
                    GaussianBelief { mean: m3, variance: v * 0.5 },
                ],
                0,
            ).unwrap();
            let r = s.responsibilities(x);
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
