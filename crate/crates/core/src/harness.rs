//! End-to-end noisy-SGLD training: calibration, the training loop,
//! per-epoch evaluation, and privacy reporting.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{self, AccountantConfig, BudgetBreakdown, Method};
use crate::config::{Accounting, DatasetSource, NoiseScaling, TrainConfig};
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::mechanism::{self, DropoutSummary, NoiseSpec, DEFAULT_ALPHA_FLOOR};
use crate::model::{self, ModelParams};

/// Relative tolerance of the report self-consistency check.
pub const REPORT_TOLERANCE: f64 = 1e-6;

/// Number of update steps `T = E / nu = E N / S`, rounded to the nearest
/// integer.
pub fn iteration_count(epochs: usize, n_train: usize, batch_size: usize) -> u64 {
    ((epochs as f64 * n_train as f64 / batch_size as f64).round() as u64).max(1)
}

/// Accountant view of a training config over a training set of `n_train`
/// rows. `None` for non-private runs.
pub fn accountant_config(config: &TrainConfig, n_train: usize) -> Result<Option<AccountantConfig>> {
    let Some(method) = config.accounting.method() else {
        return Ok(None);
    };
    if config.batch_size > n_train {
        return Err(Error::Config(format!(
            "batch size {} exceeds training set size {n_train}",
            config.batch_size
        )));
    }
    let nu = config.batch_size as f64 / n_train as f64;
    let t = iteration_count(config.epochs, n_train, config.batch_size);
    AccountantConfig::new(t, nu, config.delta_split, method).map(Some)
}

/// Privacy audit of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub private: bool,
    pub method: Accounting,
    pub sigma: Option<f64>,
    pub eps_iter: Option<f64>,
    pub delta_iter: Option<f64>,
    pub eps_amplified: Option<f64>,
    pub delta_amplified: Option<f64>,
    pub eps_tot: Option<f64>,
    pub delta_tot: Option<f64>,
    pub rho_total: Option<f64>,
    pub sensitivity: Option<f64>,
    pub iterations: u64,
    pub sampling_ratio: f64,
    pub delta_split: f64,
    pub dropout: Option<DropoutSummary>,
    /// Wall-clock stamp added by front ends; the only non-reproducible field.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generated_at: Option<String>,
}

impl PrivacyReport {
    fn non_private(iterations: u64, sampling_ratio: f64, delta_split: f64) -> Self {
        Self {
            private: false,
            method: Accounting::None,
            sigma: None,
            eps_iter: None,
            delta_iter: None,
            eps_amplified: None,
            delta_amplified: None,
            eps_tot: None,
            delta_tot: None,
            rho_total: None,
            sensitivity: None,
            iterations,
            sampling_ratio,
            delta_split,
            dropout: None,
            generated_at: None,
        }
    }

    fn from_breakdown(b: &BudgetBreakdown, cfg: &AccountantConfig, clip_threshold: f64) -> Self {
        Self {
            private: true,
            method: b.method.into(),
            sigma: Some(b.sigma),
            eps_iter: Some(b.per_iteration.eps),
            delta_iter: Some(b.per_iteration.delta),
            eps_amplified: Some(b.amplified.eps),
            delta_amplified: Some(b.amplified.delta),
            eps_tot: Some(b.total.eps),
            delta_tot: Some(b.total.delta),
            rho_total: b.rho_total,
            sensitivity: Some(2.0 * clip_threshold),
            iterations: cfg.iterations,
            sampling_ratio: cfg.sampling_ratio,
            delta_split: cfg.delta_split,
            dropout: None,
            generated_at: None,
        }
    }

    /// Re-runs the forward accountant on the recorded sigma and run shape
    /// and checks it reproduces `eps_tot`.
    pub fn verify(&self) -> Result<()> {
        let Some(method) = self.method.method() else {
            return if self.sigma.is_none() && self.eps_tot.is_none() {
                Ok(())
            } else {
                Err(Error::Config("non-private report carries a privacy budget".into()))
            };
        };
        let missing = || Error::Config("private report is missing sigma or the total budget".into());
        let sigma = self.sigma.ok_or_else(missing)?;
        let eps = self.eps_tot.ok_or_else(missing)?;
        let delta = self.delta_tot.ok_or_else(missing)?;
        let cfg = AccountantConfig::new(self.iterations, self.sampling_ratio, self.delta_split, method)?;
        let again = accountant::breakdown(sigma, delta, &cfg)?.total.eps;
        if ((again - eps) / eps).abs() > REPORT_TOLERANCE {
            return Err(Error::Config(format!(
                "report eps_tot {eps} but the accountant gives {again} at sigma {sigma}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Noise multiplier and privacy report for `config` over `n_train` rows,
/// computed without training.
pub fn privacy_report(config: &TrainConfig, n_train: usize) -> Result<PrivacyReport> {
    config.validate()?;
    let t = iteration_count(config.epochs, n_train, config.batch_size);
    let nu = config.batch_size as f64 / n_train as f64;
    let Some(cfg) = accountant_config(config, n_train)? else {
        return Ok(PrivacyReport::non_private(t, nu, config.delta_split));
    };
    let sigma = match (config.epsilon, config.sigma) {
        (_, Some(s)) => s,
        (Some(eps), None) => accountant::calibrate_sigma(eps, config.delta, &cfg)?,
        (None, None) => unreachable!("validated"),
    };
    let b = accountant::breakdown(sigma, config.delta, &cfg)?;
    Ok(PrivacyReport::from_breakdown(&b, &cfg, config.clip_threshold))
}

/// One row per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    /// Mean over the epoch's steps of the full-gradient L2 norm before
    /// clipping.
    pub mean_grad_norm: f64,
    /// Fraction of the epoch's steps where at least one layer was clipped.
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub epochs: Vec<EpochRecord>,
}

impl MetricsTrace {
    pub const CSV_HEADER: &'static str = "epoch,test_accuracy,train_accuracy,mean_grad_norm,clipped_fraction";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.test_accuracy, r.train_accuracy, r.mean_grad_norm, r.clipped_fraction
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.test_accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: PrivacyReport,
    pub trace: MetricsTrace,
    /// Test accuracy of the posterior predictive over the last
    /// `posterior_samples` epoch snapshots, when requested.
    pub posterior_test_accuracy: Option<f64>,
}

impl TrainOutcome {
    /// Accuracy the run is scored by: posterior average if requested,
    /// otherwise the last iterate.
    pub fn test_accuracy(&self) -> f64 {
        self.posterior_test_accuracy
            .or_else(|| self.trace.final_test_accuracy())
            .unwrap_or(f64::NAN)
    }
}

/// Loads the train and test sets named by `config`.
pub fn load_datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetSource::Digits { train, test } => dataset::load_digits_csv(train, test),
        DatasetSource::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            dataset::load_idx(train_images, train_labels)?,
            dataset::load_idx(test_images, test_labels)?,
        )),
    }
}

fn check_datasets(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    if train.n_features() != test.n_features() || train.n_classes() != test.n_classes() {
        return Err(Error::Config(format!(
            "train ({} features, {} classes) and test ({} features, {} classes) disagree",
            train.n_features(),
            train.n_classes(),
            test.n_features(),
            test.n_classes()
        )));
    }
    if train.n_examples() == 0 || test.n_examples() == 0 {
        return Err(Error::Config("train and test sets must be non-empty".into()));
    }
    if config.batch_size > train.n_examples() {
        return Err(Error::Config(format!(
            "batch size {} exceeds training set size {}",
            config.batch_size,
            train.n_examples()
        )));
    }
    Ok(())
}

/// Differentially private dropout training.
///
/// Each of the `T = E / nu` steps samples a minibatch without replacement,
/// takes the log-posterior gradient, clips each parameter block to L2 norm
/// `C`, adds `N(0, 4 C^2 sigma^2)` noise per coordinate, and applies
/// `theta += (eta_t / 2)(grad + noise)` with `eta_t = eta0 / t^gamma`. With
/// `accounting = none` the clip and noise are skipped.
pub fn train_dpd(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_datasets(config, train, test)?;
    let mut report = privacy_report(config, train.n_examples())?;
    let noise = report
        .sigma
        .map(|s| NoiseSpec::new(config.clip_threshold, s))
        .transpose()?;

    let n = train.n_examples();
    let total_steps = iteration_count(config.epochs, n, config.batch_size);
    let epoch_end = |e: usize| iteration_count(e, n, config.batch_size);

    let mut params = model::init_params(
        train.n_features(),
        config.hidden_units,
        train.n_classes(),
        config.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Keep the training stream apart from the initialization stream.
    rng.set_stream(1);

    let (d, h, k) = params.dims();
    let mut noise_buf = ModelParams::zeros(d, h, k);
    let mut trace = MetricsTrace::default();
    let mut snapshots = Vec::new();
    let (mut norm_sum, mut clipped_steps, mut steps_in_epoch) = (0.0, 0usize, 0usize);
    let mut epoch = 1;

    for t in 1..=total_steps {
        let batch = dataset::sample_minibatch(train, config.batch_size, &mut rng)?;
        let mut grad = model::log_posterior_grad(&params, batch.as_batch(), n, config.prior_precision)?;
        norm_sum += mechanism::l2_norm(&grad.flatten());
        steps_in_epoch += 1;

        let eta = config.schedule.step_size(t)?;
        match &noise {
            Some(spec) => {
                let mut clipped = false;
                for layer in grad.layers_mut() {
                    clipped |= mechanism::clip_in_place(layer, spec.clip_threshold) > spec.clip_threshold;
                }
                clipped_steps += usize::from(clipped);
                for layer in noise_buf.layers_mut() {
                    layer.iter_mut().for_each(|v| *v = 0.0);
                    mechanism::add_update_noise(layer, spec, &mut rng);
                }
                match config.noise_scaling {
                    NoiseScaling::Algorithm => model::sgld_update_in_place(&mut params, &grad, &noise_buf, eta)?,
                    NoiseScaling::Canonical => {
                        // (eta/2) grad + sqrt(eta) xi == (eta/2)(grad + (2/sqrt(eta)) xi)
                        let scale = 2.0 / eta.sqrt();
                        for layer in noise_buf.layers_mut() {
                            layer.iter_mut().for_each(|v| *v *= scale);
                        }
                        model::sgld_update_in_place(&mut params, &grad, &noise_buf, eta)?;
                    }
                }
            }
            None => {
                for layer in noise_buf.layers_mut() {
                    layer.iter_mut().for_each(|v| *v = 0.0);
                }
                model::sgld_update_in_place(&mut params, &grad, &noise_buf, eta)?;
            }
        }

        if t == epoch_end(epoch) {
            trace.epochs.push(EpochRecord {
                epoch,
                test_accuracy: model::evaluate_accuracy(&params, test.as_batch())?,
                train_accuracy: model::evaluate_accuracy(&params, train.as_batch())?,
                mean_grad_norm: norm_sum / steps_in_epoch as f64,
                clipped_fraction: clipped_steps as f64 / steps_in_epoch as f64,
            });
            if config.posterior_samples > 0 && epoch + config.posterior_samples > config.epochs {
                snapshots.push(params.clone());
            }
            norm_sum = 0.0;
            clipped_steps = 0;
            steps_in_epoch = 0;
            epoch += 1;
        }
    }

    let posterior_test_accuracy = if snapshots.is_empty() {
        None
    } else {
        let probs = model::posterior_predictive(&snapshots, test.features())?;
        Some(model::accuracy_of_predictions(&probs, k, test.labels())?)
    };

    if let Some(spec) = &noise {
        let rates = mechanism::dropout_alpha_from_noise(spec, &params.flatten(), DEFAULT_ALPHA_FLOOR)?;
        report.dropout = Some(rates.summary());
    }

    Ok(TrainOutcome {
        params,
        report,
        trace,
        posterior_test_accuracy,
    })
}

/// The non-private SGLD baseline: no clipping, no injected noise.
pub fn train_nonprivate(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<(ModelParams, MetricsTrace)> {
    let mut np = config.clone();
    np.accounting = Accounting::None;
    np.epsilon = None;
    np.sigma = None;
    let out = train_dpd(&np, train, test)?;
    Ok((out.params, out.trace))
}

/// Trains once per seed, in parallel; results come back in seed order.
pub fn train_seeds(config: &TrainConfig, train: &Dataset, test: &Dataset, seeds: &[u64]) -> Result<Vec<TrainOutcome>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            train_dpd(&cfg, train, test)
        })
        .collect()
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    /// Calibrated sigma, or the calibration error message.
    pub sigma_ac: std::result::Result<f64, String>,
    pub sigma_zcdp: std::result::Result<f64, String>,
}

/// Calibrates both routes at each eps; rows sorted ascending by eps. A
/// failing calibration is recorded in its cell and does not stop the sweep.
pub fn sweep_sigma_vs_eps(cfg: &AccountantConfig, delta_tot: f64, eps_grid: &[f64]) -> Result<Vec<SweepRow>> {
    if eps_grid.is_empty() {
        return Err(Error::domain("eps grid is empty"));
    }
    cfg.validate()?;
    let mut grid = eps_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    Ok(grid
        .into_iter()
        .map(|eps| SweepRow {
            eps,
            sigma_ac: accountant::calibrate_sigma(eps, delta_tot, &cfg.with_method(Method::Ac))
                .map_err(|e| e.to_string()),
            sigma_zcdp: accountant::calibrate_sigma(eps, delta_tot, &cfg.with_method(Method::Zcdp))
                .map_err(|e| e.to_string()),
        })
        .collect())
}

/// CSV with columns `eps,sigma_ac,sigma_zcdp`; failed cells are left empty.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let cell = |r: &std::result::Result<f64, String>| r.as_ref().map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("eps,sigma_ac,sigma_zcdp\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.eps, cell(&r.sigma_ac), cell(&r.sigma_zcdp)).expect("writing to a String");
    }
    out
}

/// Writes `trace.csv`, `report.json` and `model.ckpt` into `dir`.
pub fn write_outputs(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trace = dir.join("trace.csv");
    std::fs::write(&trace, outcome.trace.to_csv()).map_err(|e| Error::io(&trace, e))?;
    let report = dir.join("report.json");
    std::fs::write(&report, outcome.report.to_json()).map_err(|e| Error::io(&report, e))?;
    crate::checkpoint::save(&outcome.params, dir.join("model.ckpt"))
}
