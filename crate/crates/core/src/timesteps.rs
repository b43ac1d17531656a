//! Discrete timestep distribution over `K` atoms, its training phase plan and the
//! few-step inference grids.
//!
//! The distribution places a narrow Gaussian bump of width `√(0.5/K²)` on every
//! atom `μ_i = i/K` weighted by `β_i`, evaluates the mixture at the atoms and
//! renormalises.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Categorical distribution over the atoms `i/K`, `i = 1..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepDistribution {
    k: usize,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

pub fn mixture_sigma(k: usize) -> f64 {
    (0.5 / (k * k) as f64).sqrt()
}

/// 1-based indices of the four inference anchors `K/4, K/2, 3K/4, K`.
pub fn anchor_indices(k: usize) -> [usize; 4] {
    [k / 4, k / 2, 3 * k / 4, k]
}

fn check_k(k: usize) -> Result<()> {
    if k < 4 || k % 4 != 0 {
        return Err(invalid(format!("K must be a positive multiple of 4 (got {k})")));
    }
    Ok(())
}

impl TimestepDistribution {
    /// Mixture-of-Gaussians distribution from per-atom weights `beta` (length `K`).
    pub fn build_pi(k: usize, beta: &[f64]) -> Result<Self> {
        check_k(k)?;
        if beta.len() != k {
            return Err(invalid(format!("expected {k} mixture weights, got {}", beta.len())));
        }
        if beta.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(invalid("mixture weights must be finite and non-negative"));
        }
        if beta.iter().all(|&b| b == 0.0) {
            return Err(invalid("mixture weights are all zero"));
        }
        let s2 = 2.0 * mixture_sigma(k).powi(2);
        let atom = |i: usize| (i + 1) as f64 / k as f64;
        let density: Vec<f64> = (0..k)
            .map(|j| {
                beta.iter()
                    .enumerate()
                    .filter(|(_, &b)| b > 0.0)
                    .map(|(i, &b)| b * (-(atom(j) - atom(i)).powi(2) / s2).exp())
                    .sum()
            })
            .collect();
        Self::from_weights(k, density)
    }

    /// Distribution proportional to explicit per-atom weights, without mixture smoothing.
    pub fn from_weights(k: usize, weights: Vec<f64>) -> Result<Self> {
        check_k(k)?;
        if weights.len() != k || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be K finite non-negative values"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("weights sum to zero"));
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cdf = Vec::with_capacity(k);
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        Ok(Self { k, probs, cdf })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_weights(k, vec![1.0; k])
    }

    /// Discretised normal density over the atoms.
    pub fn gaussian(k: usize, center: f64, sd: f64) -> Result<Self> {
        let w = (1..=k)
            .map(|i| (-(i as f64 / k as f64 - center).powi(2) / (2.0 * sd * sd)).exp())
            .collect();
        Self::from_weights(k, w)
    }

    /// Mass only on the four anchors, in proportion to `anchor_weights`.
    pub fn sharp(k: usize, anchor_weights: [f64; 4]) -> Result<Self> {
        check_k(k)?;
        let mut w = vec![0.0; k];
        for (idx, aw) in anchor_indices(k).iter().zip(anchor_weights) {
            w[idx - 1] = aw;
        }
        Self::from_weights(k, w)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of the 1-based atom `i`.
    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i - 1]
    }

    pub fn atom(&self, i: usize) -> f64 {
        i as f64 / self.k as f64
    }

    /// Categorical draw; returns the 1-based atom index and its time `i/K`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let u: f64 = rng.random();
        let j = self.cdf.partition_point(|&c| c <= u);
        // Round-off can leave the last cdf entry just below 1; fall back to the
        // last atom with positive mass.
        let j = if j >= self.k {
            self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(self.k - 1)
        } else {
            j
        };
        (j + 1, self.atom(j + 1))
    }
}

/// One training phase: anchor weights (ordered `t = 0.25, 0.5, 0.75, 1`), the
/// floor weight given to every other atom, and the loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub start_iter: u64,
    pub anchor_betas: [f64; 4],
    #[serde(default)]
    pub floor: f64,
    pub lambda_adv: f64,
    pub lambda_dmd: f64,
}

impl Phase {
    pub fn betas(&self, k: usize) -> Vec<f64> {
        let mut beta = vec![self.floor; k];
        for (idx, b) in anchor_indices(k).iter().zip(self.anchor_betas) {
            beta[idx - 1] = b;
        }
        beta
    }
}

/// Ordered list of phases with left-closed start iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

/// Resolved configuration for one training iteration.
#[derive(Clone, Debug)]
pub struct PhaseConfig {
    pub phase: usize,
    pub dist: TimestepDistribution,
    pub lambda_adv: f64,
    pub lambda_dmd: f64,
}

pub const WARMUP_ANCHORS: [f64; 4] = [0.5, 0.5, 0.0, 0.0];
pub const DEFAULT_FLOOR: f64 = 0.01;
pub const DEFAULT_LAMBDA_ADV: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
pub const DEFAULT_LAMBDA_DMD: [f64; 4] = [0.0, 0.3, 0.5, 0.7];
pub const DEFAULT_ANCHORS: [[f64; 4]; 4] = [
    WARMUP_ANCHORS,
    [0.3, 0.3, 0.2, 0.2],
    [0.25, 0.25, 0.25, 0.25],
    [0.2, 0.2, 0.2, 0.4],
];

impl PhasePlan {
    /// Warm-up followed by three phases shifting mass toward `t = 1`, one shift every `every` iterations.
    pub fn default_with_shift(every: u64) -> Self {
        let phases = (0..4)
            .map(|p| Phase {
                start_iter: p as u64 * every,
                anchor_betas: DEFAULT_ANCHORS[p],
                floor: if p == 0 { 0.0 } else { DEFAULT_FLOOR },
                lambda_adv: DEFAULT_LAMBDA_ADV[p],
                lambda_dmd: DEFAULT_LAMBDA_DMD[p],
            })
            .collect();
        Self { phases }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.phases.first().ok_or_else(|| invalid("phase plan is empty"))?;
        if first.start_iter != 0 {
            return Err(invalid("first phase must start at iteration 0"));
        }
        for w in self.phases.windows(2) {
            if w[1].start_iter <= w[0].start_iter {
                return Err(invalid("phase start iterations must be strictly increasing"));
            }
            if w[1].anchor_betas[3] < w[0].anchor_betas[3] {
                return Err(invalid("anchor weight at t=1 must not decrease across phases"));
            }
        }
        for p in &self.phases {
            let all = p.anchor_betas.iter().chain(std::iter::once(&p.floor));
            if all.clone().any(|b| !b.is_finite() || *b < 0.0) {
                return Err(invalid("phase weights must be finite and non-negative"));
            }
            if !(p.lambda_adv.is_finite() && p.lambda_adv >= 0.0 && p.lambda_dmd.is_finite() && p.lambda_dmd >= 0.0) {
                return Err(invalid("loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn last_start(&self) -> u64 {
        self.phases.last().map_or(0, |p| p.start_iter)
    }

    /// Index of the latest phase with `start_iter <= iter`.
    pub fn phase_index(&self, iter: u64) -> Result<usize> {
        if self.phases.is_empty() {
            return Err(Error::Invalid("phase plan is empty".into()));
        }
        Ok(self.phases.partition_point(|p| p.start_iter <= iter).saturating_sub(1))
    }

    pub fn phase_lookup(&self, iter: u64, k: usize) -> Result<PhaseConfig> {
        let idx = self.phase_index(iter)?;
        let p = &self.phases[idx];
        Ok(PhaseConfig {
            phase: idx,
            dist: TimestepDistribution::build_pi(k, &p.betas(k))?,
            lambda_adv: p.lambda_adv,
            lambda_dmd: p.lambda_dmd,
        })
    }
}

/// Descending inference timesteps for a 1-, 2- or 4-step sampler.
pub fn inference_grid(n_steps: usize, k: usize) -> Result<Vec<f64>> {
    check_k(k)?;
    let anchors = anchor_indices(k).map(|i| i as f64 / k as f64);
    match n_steps {
        1 => Ok(vec![anchors[3]]),
        2 => Ok(vec![anchors[3], anchors[1]]),
        4 => Ok(vec![anchors[3], anchors[2], anchors[1], anchors[0]]),
        n => Err(invalid(format!("unsupported step count {n}; expected 1, 2 or 4"))),
    }
}

/// Ablation presets for the timestep distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiPreset {
    /// Phase plan with mixture smoothing (the default).
    Ours,
    Uniform,
    /// Normal density centred on `t = 0.5`.
    Gaussian,
    /// Only the four anchors, phase-plan anchor weights.
    Sharp,
}

pub const GAUSSIAN_PRESET_SD: f64 = 0.2;

impl PiPreset {
    pub const ALL: [PiPreset; 4] = [PiPreset::Uniform, PiPreset::Gaussian, PiPreset::Sharp, PiPreset::Ours];

    pub fn name(self) -> &'static str {
        match self {
            PiPreset::Ours => "ours",
            PiPreset::Uniform => "uniform",
            PiPreset::Gaussian => "gaussian",
            PiPreset::Sharp => "sharp",
        }
    }

    /// Distribution used in `phase` of `plan` under this preset.
    pub fn distribution(self, plan: &PhasePlan, phase: usize, k: usize) -> Result<TimestepDistribution> {
        match self {
            PiPreset::Ours => TimestepDistribution::build_pi(k, &plan.phases[phase].betas(k)),
            PiPreset::Uniform => TimestepDistribution::uniform(k),
            PiPreset::Gaussian => TimestepDistribution::gaussian(k, 0.5, GAUSSIAN_PRESET_SD),
            PiPreset::Sharp => TimestepDistribution::sharp(k, plan.phases[phase].anchor_betas),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the mixture at atom `j` (1-based), unnormalised.
    fn mixture_at(k: usize, beta: &[f64], j: usize) -> f64 {
        let sd = (0.5f64).sqrt() / k as f64;
        (1..=k)
            .map(|i| {
                let d = (j as f64 - i as f64) / k as f64;
                beta[i - 1] * (-d * d / (2.0 * sd * sd)).exp()
            })
            .sum()
    }

    #[test]
    fn one_hot_at_one_matches_direct_mixture() {
        let k = 32;
        let mut beta = vec![0.0; k];
        beta[k - 1] = 1.0;
        let d = TimestepDistribution::build_pi(k, &beta).unwrap();
        let total: f64 = (1..=k).map(|j| mixture_at(k, &beta, j)).sum();
        for j in 1..=k {
            assert!((d.prob(j) - mixture_at(k, &beta, j) / total).abs() < 1e-15);
        }
        // Neighbouring atoms sit one mixture width apart, so t=1 keeps ~72% of the mass.
        assert!((d.prob(32) - 1.0 / (1.0 + (-1.0f64).exp() + (-4.0f64).exp() + (-9.0f64).exp())).abs() < 1e-6);
        assert!(d.prob(32) > d.prob(31));
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_symmetric() {
        let plan = PhasePlan::default_with_shift(5000);
        let d = plan.phase_lookup(0, 32).unwrap().dist;
        assert!((d.prob(8) - d.prob(16)).abs() < 1e-12);
        assert!(d.prob(32) < 1e-100);
    }

    #[test]
    fn uniform_beta_is_nearly_uniform_inside() {
        let k = 32;
        let d = TimestepDistribution::build_pi(k, &vec![1.0 / k as f64; k]).unwrap();
        for j in 2..k {
            assert!((d.prob(j) - 1.0 / k as f64).abs() < 1e-3, "atom {j}: {}", d.prob(j));
        }
    }

    #[test]
    fn zero_beta_and_bad_k_rejected() {
        assert!(TimestepDistribution::build_pi(32, &[0.0; 32]).is_err());
        assert!(TimestepDistribution::build_pi(30, &[1.0; 30]).is_err());
        assert!(TimestepDistribution::build_pi(32, &[1.0; 31]).is_err());
    }

    #[test]
    fn degenerate_distribution_always_returns_its_atom() {
        let mut w = vec![0.0; 16];
        w[11] = 1.0;
        let d = TimestepDistribution::from_weights(16, w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(d.sample(&mut rng), (12, 0.75));
        }
    }

    #[test]
    fn phase_lookup_boundaries() {
        let plan = PhasePlan::default_with_shift(5000);
        plan.validate().unwrap();
        let p0 = plan.phase_lookup(0, 32).unwrap();
        assert_eq!((p0.phase, p0.lambda_adv, p0.lambda_dmd), (0, 0.0, 0.0));
        assert_eq!(plan.phases[0].anchor_betas, [0.5, 0.5, 0.0, 0.0]);
        assert_eq!(plan.phase_lookup(4999, 32).unwrap().phase, 0);
        assert_eq!(plan.phase_lookup(5000, 32).unwrap().phase, 1);
        let p3 = plan.phase_lookup(19999, 32).unwrap();
        assert_eq!((p3.phase, p3.lambda_adv, p3.lambda_dmd), (3, 0.3, 0.7));
        let modal = (1..=32).max_by(|&a, &b| p3.dist.prob(a).total_cmp(&p3.dist.prob(b))).unwrap();
        assert_eq!(modal, 32);
        assert!(PhasePlan { phases: vec![] }.phase_lookup(0, 32).is_err());
    }

    #[test]
    fn anchors_dominate_after_warmup() {
        let plan = PhasePlan::default_with_shift(5000);
        for k in [16, 32, 64] {
            for phase in 1..4 {
                let d = plan.phase_lookup(plan.phases[phase].start_iter, k).unwrap().dist;
                let anchors = anchor_indices(k);
                let min_anchor = anchors.iter().map(|&i| d.prob(i)).fold(f64::INFINITY, f64::min);
                let max_other = (1..=k)
                    .filter(|i| !anchors.contains(i))
                    .map(|i| d.prob(i))
                    .fold(0.0, f64::max);
                assert!(min_anchor > max_other, "K={k} phase {phase}");
            }
        }
    }

    #[test]
    fn invalid_plans_rejected() {
        let mut plan = PhasePlan::default_with_shift(10);
        plan.phases[2].start_iter = 10;
        assert!(plan.validate().is_err());
        let mut plan = PhasePlan::default_with_shift(10);
        plan.phases[3].anchor_betas[3] = 0.05;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(inference_grid(4, 32).unwrap(), vec![1.0, 0.75, 0.5, 0.25]);
        assert_eq!(inference_grid(2, 32).unwrap(), vec![1.0, 0.5]);
        assert_eq!(inference_grid(1, 16).unwrap(), vec![1.0]);
        assert!(inference_grid(3, 32).is_err());
    }
}
