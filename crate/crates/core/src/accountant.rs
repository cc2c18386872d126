//! Privacy arithmetic for noisy-gradient training.
//!
//! Two accounting routes turn a per-step Gaussian noise multiplier into a
//! total `(eps, delta)` guarantee and back:
//!
//! * **AC**: Gaussian mechanism per step, amplification by subsampling,
//!   then k-fold advanced composition.
//! * **zCDP**: Gaussian mechanism per step, amplification by subsampling,
//!   conversion of the amplified step to a zCDP cost, additive composition,
//!   and conversion of the total back to `(eps, delta)`.
//!
//! All logarithms are natural. Every function here is pure.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower end of the bisection bracket used by [`calibrate_sigma_ac`].
pub const SIGMA_BRACKET_LO: f64 = 1e-3;
/// Upper end of the bisection bracket used by [`calibrate_sigma_ac`].
pub const SIGMA_BRACKET_HI: f64 = 1e4;
/// Fraction of the total delta reserved for the slack term by default.
pub const DEFAULT_DELTA_SPLIT: f64 = 0.5;

/// An `(eps, delta)` differential privacy guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub eps: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    /// Validated constructor: `eps >= 0` (may be `+inf` for a vacuous
    /// guarantee) and `0 <= delta < 1`.
    pub fn new(eps: f64, delta: f64) -> Result<Self> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::domain(format!("eps must be >= 0, got {eps}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::domain(format!("delta must lie in [0, 1), got {delta}")));
        }
        Ok(Self { eps, delta })
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.eps, self.delta)
    }
}

/// A rho-zCDP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ZcdpBudget {
    pub rho: f64,
}

impl ZcdpBudget {
    pub fn new(rho: f64) -> Result<Self> {
        if rho.is_nan() || rho < 0.0 {
            return Err(Error::domain(format!("rho must be >= 0, got {rho}")));
        }
        Ok(Self { rho })
    }
}

/// Composition route used to account for the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ac,
    Zcdp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ac => "ac",
            Method::Zcdp => "zcdp",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ac" => Ok(Method::Ac),
            "zcdp" => Ok(Method::Zcdp),
            other => Err(Error::Config(format!(
                "unknown accounting method {other:?} (expected ac or zcdp)"
            ))),
        }
    }
}

/// Shape of the training run as seen by the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantConfig {
    /// Number of noisy update steps `T`.
    pub iterations: u64,
    /// Sampling ratio `nu = S / N`.
    pub sampling_ratio: f64,
    /// Fraction of the total delta assigned to the slack `delta'`.
    pub delta_split: f64,
    pub method: Method,
}

impl AccountantConfig {
    pub fn new(iterations: u64, sampling_ratio: f64, delta_split: f64, method: Method) -> Result<Self> {
        let cfg = Self {
            iterations,
            sampling_ratio,
            delta_split,
            method,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::domain("iterations must be >= 1"));
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return Err(Error::domain(format!(
                "sampling ratio must lie in (0, 1], got {}",
                self.sampling_ratio
            )));
        }
        if !(self.delta_split > 0.0 && self.delta_split < 1.0) {
            return Err(Error::domain(format!(
                "delta split must lie in (0, 1), got {}",
                self.delta_split
            )));
        }
        Ok(())
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }
}

fn check_delta_open(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")))
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {value}")))
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("sampling ratio must lie in (0, 1], got {nu}")))
    }
}

/// Standard deviation of Gaussian noise making a query with the given L2
/// sensitivity `(eps, delta)`-DP.
pub fn gaussian_sigma_for(eps: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    check_positive("eps", eps)?;
    check_delta_open(delta)?;
    check_positive("sensitivity", sensitivity)?;
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / eps)
}

/// Inverse of [`gaussian_sigma_for`]: the eps achieved by noise of standard
/// deviation `sigma`.
pub fn gaussian_eps_for(sigma: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    check_positive("sigma", sigma)?;
    check_delta_open(delta)?;
    check_positive("sensitivity", sensitivity)?;
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / sigma)
}

fn advanced_compose_eps(eps_iter: f64, k: f64, delta_slack: f64) -> f64 {
    (2.0 * k * (1.0 / delta_slack).ln()).sqrt() * eps_iter + k * eps_iter * eps_iter.exp_m1()
}

/// k-fold adaptive composition of `(eps_iter, delta_iter)`-DP mechanisms
/// with slack `delta_slack`.
pub fn advanced_compose(eps_iter: f64, delta_iter: f64, k: u64, delta_slack: f64) -> Result<PrivacyBudget> {
    if k == 0 {
        return Err(Error::domain("composition count k must be >= 1"));
    }
    let step = PrivacyBudget::new(eps_iter, delta_iter)?;
    check_delta_open(delta_slack)?;
    let kf = k as f64;
    PrivacyBudget::new(
        advanced_compose_eps(step.eps, kf, delta_slack),
        kf * step.delta + delta_slack,
    )
}

/// `ln(1 + nu (e^eps - 1))` without overflow for large `eps`.
fn amplify_eps(eps: f64, nu: f64) -> f64 {
    if eps > 1.0 {
        // ln(nu e^eps + 1 - nu) = eps + ln(nu + (1 - nu) e^-eps)
        eps + (nu + (1.0 - nu) * (-eps).exp()).ln()
    } else {
        (nu * eps.exp_m1()).ln_1p()
    }
}

/// `ln(1 + (e^eps - 1) / nu)` without overflow for large `eps`.
fn deamplify_eps(eps: f64, nu: f64) -> f64 {
    if eps > 1.0 {
        eps + (-(1.0 - nu) * (-eps).exp()).ln_1p() - nu.ln()
    } else {
        (eps.exp_m1() / nu).ln_1p()
    }
}

/// Amplification by subsampling: running an `(eps, delta)`-DP mechanism on
/// a subset where each record is included independently with probability
/// `nu` yields `(ln(1 + nu (e^eps - 1)), nu delta)`.
///
/// Requires `nu > delta`; otherwise the guarantee does not apply.
pub fn amplify_by_subsampling(budget: PrivacyBudget, nu: f64) -> Result<PrivacyBudget> {
    let budget = PrivacyBudget::new(budget.eps, budget.delta)?;
    check_nu(nu)?;
    if nu <= budget.delta {
        return Err(Error::Precondition(format!(
            "subsampling amplification requires nu > delta (nu = {nu}, delta = {})",
            budget.delta
        )));
    }
    PrivacyBudget::new(amplify_eps(budget.eps, nu), nu * budget.delta)
}

/// Algebraic inverse of [`amplify_by_subsampling`]: the per-step budget
/// whose amplification is `amplified`.
pub fn deamplify(amplified: PrivacyBudget, nu: f64) -> Result<PrivacyBudget> {
    let amplified = PrivacyBudget::new(amplified.eps, amplified.delta)?;
    check_nu(nu)?;
    let delta = amplified.delta / nu;
    if delta >= 1.0 {
        return Err(Error::domain(format!(
            "de-amplified delta {} / {nu} = {delta} is not below 1",
            amplified.delta
        )));
    }
    PrivacyBudget::new(deamplify_eps(amplified.eps, nu), delta)
}

/// zCDP cost `sensitivity^2 / (2 noise_variance)` of one Gaussian mechanism.
pub fn zcdp_of_gaussian(sensitivity: f64, noise_variance: f64) -> Result<ZcdpBudget> {
    check_positive("sensitivity", sensitivity)?;
    check_positive("noise variance", noise_variance)?;
    ZcdpBudget::new(sensitivity * sensitivity / (2.0 * noise_variance))
}

/// zCDP composes additively.
pub fn zcdp_compose(budgets: &[ZcdpBudget]) -> Result<ZcdpBudget> {
    if budgets.is_empty() {
        return Err(Error::domain("cannot compose an empty list of zCDP budgets"));
    }
    ZcdpBudget::new(budgets.iter().map(|b| b.rho).sum())
}

/// Converts rho-zCDP to `(rho + 2 sqrt(rho ln(1/delta)), delta)`-DP.
pub fn zcdp_to_dp(rho: ZcdpBudget, delta: f64) -> Result<PrivacyBudget> {
    let rho = ZcdpBudget::new(rho.rho)?;
    check_delta_open(delta)?;
    let eps = rho.rho + 2.0 * (rho.rho * (1.0 / delta).ln()).sqrt();
    PrivacyBudget::new(eps, delta)
}

/// zCDP cost of one Gaussian step calibrated to exactly `(eps, delta)`:
/// `eps^2 / (4 ln(1.25/delta))`.
pub fn dp_per_iter_to_rho(budget: PrivacyBudget) -> Result<ZcdpBudget> {
    check_positive("eps", budget.eps)?;
    check_delta_open(budget.delta)?;
    ZcdpBudget::new(budget.eps * budget.eps / (4.0 * (1.25 / budget.delta).ln()))
}

/// Every intermediate quantity of one forward accounting pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetBreakdown {
    pub method: Method,
    pub sigma: f64,
    /// Guarantee of a single step with respect to the sampled minibatch.
    pub per_iteration: PrivacyBudget,
    /// Guarantee of a single step after amplification by subsampling.
    pub amplified: PrivacyBudget,
    pub total: PrivacyBudget,
    /// Total zCDP cost; only present on the zCDP route.
    pub rho_total: Option<f64>,
}

fn per_step_eps(sigma: f64, delta_iter: f64) -> Result<f64> {
    // sigma is a noise multiplier, so the sensitivity is normalized to 1.
    gaussian_eps_for(sigma, delta_iter, 1.0)
}

/// Forward AC pipeline with all intermediate values.
pub fn breakdown_ac(sigma: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<BudgetBreakdown> {
    check_positive("sigma", sigma)?;
    check_delta_open(delta_tot)?;
    cfg.validate()?;
    let t = cfg.iterations as f64;
    let nu = cfg.sampling_ratio;
    let delta_slack = cfg.delta_split * delta_tot;
    let delta_iter = (delta_tot - delta_slack) / (t * nu);
    let eps_iter = per_step_eps(sigma, delta_iter)?;
    let per_iteration = PrivacyBudget::new(eps_iter, delta_iter)?;
    let amplified = amplify_by_subsampling(per_iteration, nu)?;
    let total = advanced_compose(amplified.eps, amplified.delta, cfg.iterations, delta_slack)?;
    Ok(BudgetBreakdown {
        method: Method::Ac,
        sigma,
        per_iteration,
        amplified,
        total,
        rho_total: None,
    })
}

/// Forward zCDP pipeline with all intermediate values.
pub fn breakdown_zcdp(sigma: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<BudgetBreakdown> {
    check_positive("sigma", sigma)?;
    check_delta_open(delta_tot)?;
    cfg.validate()?;
    let nu = cfg.sampling_ratio;
    let delta_prime = cfg.delta_split * delta_tot;
    let delta_iter = delta_prime / nu;
    check_delta_open(delta_iter)?;
    let eps_iter = per_step_eps(sigma, delta_iter)?;
    let per_iteration = PrivacyBudget::new(eps_iter, delta_iter)?;
    let amplified = amplify_by_subsampling(per_iteration, nu)?;
    let rho_step = dp_per_iter_to_rho(amplified)?;
    let rho_total = ZcdpBudget::new(cfg.iterations as f64 * rho_step.rho)?;
    let total = zcdp_to_dp(rho_total, delta_tot)?;
    Ok(BudgetBreakdown {
        method: Method::Zcdp,
        sigma,
        per_iteration,
        amplified,
        total,
        rho_total: Some(rho_total.rho),
    })
}

/// Forward pass for whichever route `cfg.method` selects.
pub fn breakdown(sigma: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<BudgetBreakdown> {
    match cfg.method {
        Method::Ac => breakdown_ac(sigma, delta_tot, cfg),
        Method::Zcdp => breakdown_zcdp(sigma, delta_tot, cfg),
    }
}

/// Total `(eps, delta)` of `cfg.iterations` noisy steps under advanced
/// composition.
pub fn total_budget_ac(sigma: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<PrivacyBudget> {
    Ok(breakdown_ac(sigma, delta_tot, cfg)?.total)
}

/// Total `(eps, delta)` of `cfg.iterations` noisy steps under zCDP
/// composition.
pub fn total_budget_zcdp(sigma: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<PrivacyBudget> {
    Ok(breakdown_zcdp(sigma, delta_tot, cfg)?.total)
}

/// Noise multiplier whose AC total equals `eps_tot`.
///
/// The total is strictly decreasing in sigma and has no closed-form
/// inverse, so this bisects on `ln(sigma)` over
/// `[SIGMA_BRACKET_LO, SIGMA_BRACKET_HI]`.
pub fn calibrate_sigma_ac(eps_tot: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<f64> {
    check_positive("eps_tot", eps_tot)?;
    check_delta_open(delta_tot)?;
    cfg.validate()?;
    let eps_at = |sigma: f64| total_budget_ac(sigma, delta_tot, cfg).map(|b| b.eps);

    let (mut lo, mut hi) = (SIGMA_BRACKET_LO, SIGMA_BRACKET_HI);
    let max_eps = eps_at(lo)?;
    let min_eps = eps_at(hi)?;
    if !(min_eps <= eps_tot && eps_tot <= max_eps) {
        return Err(Error::Calibration {
            target: eps_tot,
            min_eps,
            max_eps,
            sigma_lo: lo,
            sigma_hi: hi,
        });
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? > eps_tot {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    let (e_lo, e_hi) = (eps_at(lo)?, eps_at(hi)?);
    Ok(if (e_lo - eps_tot).abs() < (e_hi - eps_tot).abs() { lo } else { hi })
}

/// Noise multiplier whose zCDP total equals `eps_tot`, by closed-form
/// inversion of the zCDP pipeline.
pub fn calibrate_sigma_zcdp(eps_tot: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<f64> {
    check_positive("eps_tot", eps_tot)?;
    check_delta_open(delta_tot)?;
    cfg.validate()?;
    let nu = cfg.sampling_ratio;
    let delta_prime = cfg.delta_split * delta_tot;

    // rho + 2 sqrt(rho L) = eps is a quadratic in sqrt(rho):
    // sqrt(rho) = sqrt(L + eps) - sqrt(L) = eps / (sqrt(L + eps) + sqrt(L)).
    let l = (1.0 / delta_tot).ln();
    let sqrt_rho = eps_tot / ((l + eps_tot).sqrt() + l.sqrt());
    let rho_total = sqrt_rho * sqrt_rho;
    let rho_iter = rho_total / cfg.iterations as f64;
    let eps_prime = 2.0 * (rho_iter * (1.25 / delta_prime).ln()).sqrt();
    let step = deamplify(PrivacyBudget::new(eps_prime, delta_prime)?, nu)?;
    // Forward route requires nu > delta_iter; check it here so calibration
    // never returns a sigma the forward accountant rejects.
    if nu <= step.delta {
        return Err(Error::Precondition(format!(
            "subsampling amplification requires nu > delta_iter (nu = {nu}, delta_iter = {})",
            step.delta
        )));
    }
    gaussian_sigma_for(step.eps, step.delta, 1.0)
}

/// Dispatches to the calibration routine of `cfg.method`.
pub fn calibrate_sigma(eps_tot: f64, delta_tot: f64, cfg: &AccountantConfig) -> Result<f64> {
    match cfg.method {
        Method::Ac => calibrate_sigma_ac(eps_tot, delta_tot, cfg),
        Method::Zcdp => calibrate_sigma_zcdp(eps_tot, delta_tot, cfg),
    }
}
