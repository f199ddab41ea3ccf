//! Empirical distributions of count samples, total-variation distances,
//! moment summaries with jackknife standard errors, and a bootstrap
//! over-dispersion test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("sample mean is zero; dispersion ratio is undefined")]
    ZeroMean,
}

/// Probability mass function on consecutive nonnegative integers
/// `offset..offset + probs.len()`, with `tail` bounding any mass beyond.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pmf {
    pub offset: u64,
    pub probs: Vec<f64>,
    pub tail: f64,
}

impl Pmf {
    /// Mass at `k`; points beyond the stored range report 0.
    pub fn prob(&self, k: u64) -> f64 {
        if k < self.offset {
            return 0.0;
        }
        let idx = (k - self.offset) as usize;
        self.probs.get(idx).copied().unwrap_or(0.0)
    }

    /// Largest point of the stored support.
    pub fn max_point(&self) -> u64 {
        self.offset + self.probs.len().saturating_sub(1) as u64
    }

    /// The law of `X + shift` when this is the law of `X`.
    pub fn shifted(&self, shift: u64) -> Pmf {
        Pmf {
            offset: self.offset + shift,
            probs: self.probs.clone(),
            tail: self.tail,
        }
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| (self.offset + i as u64) as f64 * p)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let x = (self.offset + i as u64) as f64;
                (x - m) * (x - m) * p
            })
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum::<f64>() + self.tail
    }
}

/// Empirical pmf of nonnegative-integer samples; exact, so `tail = 0`.
pub fn empirical_pmf(samples: &[u64]) -> Result<Pmf, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::InsufficientSamples { need: 1, got: 0 });
    }
    let min = *samples.iter().min().unwrap();
    let max = *samples.iter().max().unwrap();
    let mut counts = vec![0u64; (max - min + 1) as usize];
    for &s in samples {
        counts[(s - min) as usize] += 1;
    }
    let n = samples.len() as f64;
    Ok(Pmf {
        offset: min,
        probs: counts.iter().map(|&c| c as f64 / n).collect(),
        tail: 0.0,
    })
}

/// Total-variation distance between two pmfs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TvEstimate {
    /// Distance between the stored (truncated) parts.
    pub point: f64,
    /// `point` plus half of both tail masses: an upper bound on the
    /// distance between the full laws.
    pub upper: f64,
}

/// Total variation `sup_A |P(A) - Q(A)| = (1/2) sum_k |p_k - q_k|` over
/// the union of the stored supports, with tails folded into `upper`.
pub fn tv_distance(p: &Pmf, q: &Pmf) -> TvEstimate {
    let lo = p.offset.min(q.offset);
    let hi = p.max_point().max(q.max_point());
    let mut sum = 0.0;
    for k in lo..=hi {
        sum += (p.prob(k) - q.prob(k)).abs();
    }
    let point = 0.5 * sum;
    TvEstimate {
        point,
        upper: point + 0.5 * (p.tail + q.tail),
    }
}

/// Estimated total variation between the law of `X` and of `X + 1`.
pub fn shift_tv(samples: &[u64]) -> Result<TvEstimate, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::InsufficientSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let pmf = empirical_pmf(samples)?;
    Ok(tv_distance(&pmf, &pmf.shifted(1)))
}

/// Plug-in Monte Carlo noise floor for a total-variation estimate built
/// from `n` samples of a law with pmf `pmf`: half the summed standard
/// errors of the cell frequencies, `(1/2) sum_k sqrt(p_k / n)`.
pub fn mc_noise_floor(pmf: &Pmf, n: usize) -> f64 {
    let nf = n as f64;
    0.5 * pmf.probs.iter().map(|p| (p / nf).sqrt()).sum::<f64>()
}

/// Sample moments of count data with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSummary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Mean of `x (x - 1)`.
    pub factorial2: f64,
    /// Mean of `x (x - 1) (x - 2)`.
    pub factorial3: f64,
    pub se_mean: f64,
    /// Jackknife standard error of the sample variance.
    pub se_variance: f64,
    pub se_factorial2: f64,
    pub se_factorial3: f64,
}

/// Mean, variance, and factorial moments with standard errors. The
/// variance SE is the leave-one-out jackknife; the factorial moments are
/// sample means, for which the jackknife reduces to the usual SE of a
/// mean.
pub fn moments(samples: &[u64]) -> Result<MomentSummary, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::InsufficientSamples { need: 2, got: n });
    }
    let nf = n as f64;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut f2_sum = 0.0;
    let mut f3_sum = 0.0;
    for &s in samples {
        let x = s as f64;
        s1 += x;
        s2 += x * x;
        f2_sum += x * (x - 1.0);
        f3_sum += x * (x - 1.0) * (x - 2.0);
    }
    let mean = s1 / nf;
    let variance = (s2 - s1 * s1 / nf) / (nf - 1.0);
    let factorial2 = f2_sum / nf;
    let factorial3 = f3_sum / nf;

    let se_mean = (variance.max(0.0) / nf).sqrt();
    let se_of_mean = |mean_g: f64, g: fn(f64) -> f64| -> f64 {
        let ss: f64 = samples
            .iter()
            .map(|&s| {
                let d = g(s as f64) - mean_g;
                d * d
            })
            .sum();
        (ss / (nf - 1.0) / nf).sqrt()
    };
    let se_factorial2 = se_of_mean(factorial2, |x| x * (x - 1.0));
    let se_factorial3 = se_of_mean(factorial3, |x| x * (x - 1.0) * (x - 2.0));

    // Leave-one-out variances from the retained sums; a single leftover
    // point has no spread.
    let mut theta = Vec::with_capacity(n);
    for &s in samples {
        let x = s as f64;
        let s1i = s1 - x;
        let s2i = s2 - x * x;
        let mf = (n - 1) as f64;
        theta.push(if n > 2 {
            (s2i - s1i * s1i / mf) / (mf - 1.0)
        } else {
            0.0
        });
    }
    let theta_bar = theta.iter().sum::<f64>() / nf;
    let ss: f64 = theta.iter().map(|t| (t - theta_bar) * (t - theta_bar)).sum();
    let se_variance = ((nf - 1.0) / nf * ss).sqrt();

    Ok(MomentSummary {
        n,
        mean,
        variance,
        factorial2,
        factorial3,
        se_mean,
        se_variance,
        se_factorial2,
        se_factorial3,
    })
}

/// Bootstrap configuration for [`overdispersion_test`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispersionVerdict {
    /// The 95% CI for `variance / mean` lies above 1.
    OverDispersed,
    /// The CI contains 1.
    ConsistentWithPoisson,
    /// The CI lies below 1; equilibrium flow counts should never do
    /// this, so it flags a simulation or configuration problem.
    UnderDispersedAnomaly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionReport {
    /// Point estimate of `variance / mean`.
    pub ratio: f64,
    /// 95% percentile bootstrap interval for the ratio.
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub verdict: DispersionVerdict,
    pub resamples: usize,
}

fn dispersion_ratio(sum: f64, sum_sq: f64, n: f64) -> f64 {
    let mean = sum / n;
    if mean <= 0.0 {
        return 0.0;
    }
    let var = (sum_sq - sum * sum / n) / (n - 1.0);
    var / mean
}

fn bootstrap_ratio(samples: &[u64], seed: u64, resample: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(resample);
    let n = samples.len();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let x = samples[rng.random_range(0..n)] as f64;
        sum += x;
        sum_sq += x * x;
    }
    dispersion_ratio(sum, sum_sq, n as f64)
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Tests `variance / mean > 1` with a seeded percentile bootstrap. Each
/// resample runs on its own RNG stream, so the result is identical for
/// the sequential and parallel builds.
pub fn overdispersion_test(
    samples: &[u64],
    config: BootstrapConfig,
) -> Result<DispersionReport, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::InsufficientSamples { need: 2, got: n });
    }
    if config.resamples < 2 {
        return Err(StatsError::InsufficientSamples {
            need: 2,
            got: config.resamples,
        });
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &s in samples {
        let x = s as f64;
        sum += x;
        sum_sq += x * x;
    }
    if sum <= 0.0 {
        return Err(StatsError::ZeroMean);
    }
    let ratio = dispersion_ratio(sum, sum_sq, n as f64);

    #[cfg(feature = "parallel")]
    let mut ratios: Vec<f64> = (0..config.resamples as u64)
        .into_par_iter()
        .map(|b| bootstrap_ratio(samples, config.seed, b))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let mut ratios: Vec<f64> = (0..config.resamples as u64)
        .map(|b| bootstrap_ratio(samples, config.seed, b))
        .collect();
    ratios.sort_by(f64::total_cmp);

    let ci_lower = quantile(&ratios, 0.025);
    let ci_upper = quantile(&ratios, 0.975);
    let verdict = if ci_lower > 1.0 {
        DispersionVerdict::OverDispersed
    } else if ci_upper < 1.0 {
        DispersionVerdict::UnderDispersedAnomaly
    } else {
        DispersionVerdict::ConsistentWithPoisson
    };
    Ok(DispersionReport {
        ratio,
        ci_lower,
        ci_upper,
        verdict,
        resamples: config.resamples,
    })
}
