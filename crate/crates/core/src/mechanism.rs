//! Per-step randomization: L2 clipping, Gaussian perturbation, and the
//! dropout-rate view of the injected noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor below which a weight's dropout rate is reported as undefined.
pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-8;

/// Clipping threshold `C` and noise multiplier `sigma`.
///
/// Clipping bounds the L2 sensitivity of a gradient sum by `2C`, and the
/// perturbation is `N(0, (2 C sigma)^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub clip_threshold: f64,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(clip_threshold: f64, sigma: f64) -> Result<Self> {
        if !(clip_threshold > 0.0 && clip_threshold.is_finite()) {
            return Err(Error::domain(format!(
                "clip threshold must be positive, got {clip_threshold}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { clip_threshold, sigma })
    }

    /// L2 sensitivity of a sum of clipped gradients.
    pub fn sensitivity(&self) -> f64 {
        2.0 * self.clip_threshold
    }

    /// Per-coordinate noise standard deviation `2 C sigma`.
    pub fn noise_std(&self) -> f64 {
        self.sensitivity() * self.sigma
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_std().powi(2)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `gradient` in place by `1 / max(1, ||g|| / C)` and returns the
/// norm it had before clipping.
pub fn clip_in_place(gradient: &mut [f64], clip_threshold: f64) -> f64 {
    let norm = l2_norm(gradient);
    if norm > clip_threshold {
        let scale = clip_threshold / norm;
        gradient.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// `g / max(1, ||g||_2 / C)`.
pub fn clip_by_l2(gradient: &[f64], clip_threshold: f64) -> Vec<f64> {
    let mut out = gradient.to_vec();
    clip_in_place(&mut out, clip_threshold);
    out
}

fn noise_distribution(spec: &NoiseSpec) -> Normal<f64> {
    // NoiseSpec guarantees a positive finite std.
    Normal::new(0.0, spec.noise_std()).expect("noise std is positive and finite")
}

/// Adds i.i.d. `N(0, 4 C^2 sigma^2)` draws to every coordinate of `target`.
pub fn add_update_noise<R: Rng + ?Sized>(target: &mut [f64], spec: &NoiseSpec, rng: &mut R) {
    let dist = noise_distribution(spec);
    target.iter_mut().for_each(|t| *t += dist.sample(rng));
}

/// A fresh `dimension`-vector of `N(0, 4 C^2 sigma^2)` noise.
pub fn sample_update_noise<R: Rng + ?Sized>(dimension: usize, spec: &NoiseSpec, rng: &mut R) -> Vec<f64> {
    let dist = noise_distribution(spec);
    (0..dimension).map(|_| dist.sample(rng)).collect()
}

/// Bernoulli dropout rate `p` to Gaussian dropout variance ratio `p / (1 - p)`.
pub fn drop_prob_to_alpha(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("drop probability must lie in [0, 1), got {p}")));
    }
    Ok(p / (1.0 - p))
}

/// Inverse of [`drop_prob_to_alpha`].
pub fn alpha_to_drop_prob(alpha: f64) -> Result<f64> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::domain(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(if alpha.is_infinite() { 1.0 } else { alpha / (1.0 + alpha) })
}

/// Per-weight Gaussian dropout rates equivalent to the injected noise.
///
/// `None` marks weights whose magnitude is below the floor, where
/// `4 C^2 sigma^2 = alpha theta^2` has no finite solution.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutRateMap {
    pub alpha: Vec<Option<f64>>,
    pub drop_prob: Vec<Option<f64>>,
}

impl DropoutRateMap {
    pub fn defined(&self) -> usize {
        self.alpha.iter().filter(|a| a.is_some()).count()
    }

    pub fn summary(&self) -> DropoutSummary {
        let mut alphas: Vec<f64> = self.alpha.iter().flatten().copied().collect();
        let mut probs: Vec<f64> = self.drop_prob.iter().flatten().copied().collect();
        alphas.sort_by(f64::total_cmp);
        probs.sort_by(f64::total_cmp);
        DropoutSummary {
            defined: alphas.len(),
            undefined: self.alpha.len() - alphas.len(),
            alpha: Stats::of_sorted(&alphas),
            drop_prob: Stats::of_sorted(&probs),
        }
    }
}

/// Recovers `alpha_j = 4 C^2 sigma^2 / theta_j^2` and the matching
/// `p_j = alpha_j / (1 + alpha_j)` for every `|theta_j| >= floor`.
pub fn dropout_alpha_from_noise(spec: &NoiseSpec, theta: &[f64], floor: f64) -> Result<DropoutRateMap> {
    if floor.is_nan() || floor <= 0.0 {
        return Err(Error::domain(format!("floor must be positive, got {floor}")));
    }
    let var = spec.noise_variance();
    let alpha: Vec<Option<f64>> = theta
        .iter()
        .map(|&t| (t.abs() >= floor).then(|| var / (t * t)))
        .collect();
    let drop_prob = alpha.iter().map(|a| a.map(|a| a / (1.0 + a))).collect();
    Ok(DropoutRateMap { alpha, drop_prob })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Stats {
    fn of_sorted(v: &[f64]) -> Option<Self> {
        let n = v.len();
        if n == 0 {
            return None;
        }
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

/// Summary of a [`DropoutRateMap`] for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSummary {
    pub defined: usize,
    pub undefined: usize,
    pub alpha: Option<Stats>,
    pub drop_prob: Option<Stats>,
}
