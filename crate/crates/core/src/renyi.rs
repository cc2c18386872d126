//! Rényi divergence between equal-variance Gaussians, in closed form and by
//! direct Monte-Carlo evaluation of the defining expectation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum sample count accepted by [`estimate_renyi_mc`].
pub const MIN_MC_SAMPLES: usize = 1000;

fn check_args(alpha: f64, mean_shift: f64, variance: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("Rényi order must be > 1, got {alpha}")));
    }
    if !mean_shift.is_finite() {
        return Err(Error::domain("mean shift must be finite"));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::domain(format!("variance must be positive, got {variance}")));
    }
    Ok(())
}

/// `D_alpha(N(0, v) || N(shift, v)) = alpha shift^2 / (2 v)`.
pub fn renyi_divergence_gaussian(alpha: f64, mean_shift: f64, variance: f64) -> Result<f64> {
    check_args(alpha, mean_shift, variance)?;
    Ok(alpha * mean_shift * mean_shift / (2.0 * variance))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenyiEstimate {
    pub estimate: f64,
    /// Delta-method standard error of `estimate`.
    pub std_error: f64,
}

/// Monte-Carlo estimate of `1/(alpha-1) ln E_{x~P1}[(P1(x)/P2(x))^(alpha-1)]`
/// with `P1 = N(0, v)` and `P2 = N(shift, v)`.
///
/// The inner expectation is averaged in log space so heavy-tailed weights do
/// not overflow. Reproducible for a fixed `seed`.
pub fn estimate_renyi_mc(
    alpha: f64,
    mean_shift: f64,
    variance: f64,
    samples: usize,
    seed: u64,
) -> Result<RenyiEstimate> {
    check_args(alpha, mean_shift, variance)?;
    if samples < MIN_MC_SAMPLES {
        return Err(Error::domain(format!(
            "at least {MIN_MC_SAMPLES} samples required, got {samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::domain(e.to_string()))?;

    // log of (P1/P2)^(alpha-1) at x.
    let log_weights: Vec<f64> = (0..samples)
        .map(|_| {
            let x: f64 = normal.sample(&mut rng);
            let log_ratio = (mean_shift * mean_shift - 2.0 * x * mean_shift) / (2.0 * variance);
            (alpha - 1.0) * log_ratio
        })
        .collect();

    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = samples as f64;
    // Scaled weights w_i / e^max lie in (0, 1].
    let scaled: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (var / n).sqrt();

    let log_mean = max + mean.ln();
    Ok(RenyiEstimate {
        estimate: log_mean / (alpha - 1.0),
        std_error: se_mean / (mean * (alpha - 1.0)),
    })
}
