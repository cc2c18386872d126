//! Training configuration and its flat `key = value` file format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Relative
//! paths are resolved against the directory holding the config file.
//!
//! ```text
//! dataset = digits
//! train_path = ../data/digits/train.csv
//! test_path = ../data/digits/test.csv
//! hidden_units = 500
//! batch_size = 100
//! epochs = 100
//! clip_threshold = 2
//! eta0 = 0.05
//! gamma = 1
//! prior_precision = 1e-4
//! method = zcdp          # ac | zcdp | none
//! epsilon = 1            # or: sigma = 3.5
//! delta = 1e-4
//! delta_split = 0.5
//! seed = 7
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accountant::{Method, DEFAULT_DELTA_SPLIT};
use crate::error::{Error, Result};
use crate::model::StepSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    Digits {
        train: PathBuf,
        test: PathBuf,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Accounting route for a run; `None` trains without clipping or noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accounting {
    None,
    Ac,
    Zcdp,
}

impl Accounting {
    pub fn method(self) -> Option<Method> {
        match self {
            Accounting::None => None,
            Accounting::Ac => Some(Method::Ac),
            Accounting::Zcdp => Some(Method::Zcdp),
        }
    }
}

impl From<Method> for Accounting {
    fn from(m: Method) -> Self {
        match m {
            Method::Ac => Accounting::Ac,
            Method::Zcdp => Accounting::Zcdp,
        }
    }
}

impl fmt::Display for Accounting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method() {
            Some(m) => m.fmt(f),
            None => f.write_str("none"),
        }
    }
}

impl FromStr for Accounting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            Ok(Accounting::None)
        } else {
            s.parse::<Method>().map(Accounting::from)
        }
    }
}

/// How the injected noise enters the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseScaling {
    /// `theta += (eta/2) (grad + xi)`.
    Algorithm,
    /// `theta += (eta/2) grad + sqrt(eta) xi`, the textbook SGLD scaling; used
    /// for the SGLD baseline without dropout.
    Canonical,
}

impl fmt::Display for NoiseScaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseScaling::Algorithm => "algorithm",
            NoiseScaling::Canonical => "canonical",
        })
    }
}

impl FromStr for NoiseScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "algorithm" => Ok(NoiseScaling::Algorithm),
            "canonical" => Ok(NoiseScaling::Canonical),
            other => Err(Error::Config(format!(
                "unknown noise scaling {other:?} (expected algorithm or canonical)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetSource,
    pub hidden_units: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_threshold: f64,
    pub schedule: StepSchedule,
    pub prior_precision: f64,
    pub accounting: Accounting,
    /// Target total eps; mutually exclusive with `sigma`.
    pub epsilon: Option<f64>,
    /// Explicit noise multiplier; mutually exclusive with `epsilon`.
    pub sigma: Option<f64>,
    pub delta: f64,
    pub delta_split: f64,
    pub seed: u64,
    pub noise_scaling: NoiseScaling,
    /// Number of end-of-epoch parameter snapshots averaged for posterior
    /// prediction; 0 scores the last iterate only.
    pub posterior_samples: usize,
}

impl TrainConfig {
    /// The DIGITS experiment defaults with the given data files.
    pub fn digits(train: impl Into<PathBuf>, test: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetSource::Digits {
                train: train.into(),
                test: test.into(),
            },
            hidden_units: 500,
            batch_size: 100,
            epochs: 100,
            clip_threshold: 2.0,
            schedule: StepSchedule { eta0: 0.05, gamma: 1.0 },
            prior_precision: 1e-4,
            accounting: Accounting::None,
            epsilon: None,
            sigma: None,
            delta: 1e-4,
            delta_split: DEFAULT_DELTA_SPLIT,
            seed: 0,
            noise_scaling: NoiseScaling::Algorithm,
            posterior_samples: 0,
        }
    }

    /// The MNIST experiment defaults with the given IDX files.
    pub fn mnist(
        train_images: impl Into<PathBuf>,
        train_labels: impl Into<PathBuf>,
        test_images: impl Into<PathBuf>,
        test_labels: impl Into<PathBuf>,
    ) -> Self {
        Self {
            dataset: DatasetSource::Mnist {
                train_images: train_images.into(),
                train_labels: train_labels.into(),
                test_images: test_images.into(),
                test_labels: test_labels.into(),
            },
            hidden_units: 1000,
            batch_size: 600,
            epochs: 200,
            clip_threshold: 3.0,
            schedule: StepSchedule { eta0: 0.1, gamma: 1.0 },
            ..Self::digits("", "")
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_units == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("hidden_units, batch_size and epochs must be >= 1".into());
        }
        if !(self.clip_threshold > 0.0 && self.clip_threshold.is_finite()) {
            return bad(format!("clip_threshold must be positive, got {}", self.clip_threshold));
        }
        StepSchedule::new(self.schedule.eta0, self.schedule.gamma).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.prior_precision >= 0.0 && self.prior_precision.is_finite()) {
            return bad(format!("prior_precision must be >= 0, got {}", self.prior_precision));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.delta_split > 0.0 && self.delta_split < 1.0) {
            return bad(format!("delta_split must lie in (0, 1), got {}", self.delta_split));
        }
        match (self.accounting, self.epsilon, self.sigma) {
            (Accounting::None, None, None) => {}
            (Accounting::None, _, _) => {
                return bad("method = none takes neither epsilon nor sigma".into());
            }
            (_, Some(_), Some(_)) => return bad("epsilon and sigma are mutually exclusive".into()),
            (_, None, None) => return bad("a private method needs exactly one of epsilon or sigma".into()),
            (_, Some(e), None) if !(e > 0.0 && e.is_finite()) => {
                return bad(format!("epsilon must be positive, got {e}"));
            }
            (_, None, Some(s)) if !(s > 0.0 && s.is_finite()) => {
                return bad(format!("sigma must be positive, got {s}"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn is_private(&self) -> bool {
        self.accounting != Accounting::None
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses config text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kind: Option<String> = None;
        let mut paths: [Option<PathBuf>; 6] = Default::default();
        let mut cfg = Self::digits("", "");
        let mut seen_mnist_defaults = false;
        let mut entries = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            entries.push((lineno + 1, key.trim().to_string(), value.trim().to_string()));
        }

        // The dataset kind picks the defaults, so it is applied first.
        if let Some((_, _, v)) = entries.iter().find(|(_, k, _)| k == "dataset") {
            kind = Some(v.to_ascii_lowercase());
            if v.eq_ignore_ascii_case("mnist") {
                cfg = Self::mnist("", "", "", "");
                seen_mnist_defaults = true;
            }
        }

        for (line, key, value) in &entries {
            let ctx = |e: String| Error::Config(format!("line {line}: {key}: {e}"));
            let num = |v: &str| v.parse::<f64>().map_err(|e| ctx(e.to_string()));
            let int = |v: &str| v.parse::<usize>().map_err(|e| ctx(e.to_string()));
            let resolve = |v: &str| {
                let p = PathBuf::from(v);
                if p.is_relative() { base.join(p) } else { p }
            };
            match key.as_str() {
                "dataset" => {}
                "train_path" => paths[0] = Some(resolve(value)),
                "test_path" => paths[1] = Some(resolve(value)),
                "train_images" => paths[2] = Some(resolve(value)),
                "train_labels" => paths[3] = Some(resolve(value)),
                "test_images" => paths[4] = Some(resolve(value)),
                "test_labels" => paths[5] = Some(resolve(value)),
                "hidden_units" => cfg.hidden_units = int(value)?,
                "batch_size" => cfg.batch_size = int(value)?,
                "epochs" => cfg.epochs = int(value)?,
                "clip_threshold" => cfg.clip_threshold = num(value)?,
                "eta0" => cfg.schedule.eta0 = num(value)?,
                "gamma" => cfg.schedule.gamma = num(value)?,
                "prior_precision" => cfg.prior_precision = num(value)?,
                "method" => cfg.accounting = value.parse().map_err(|e: Error| ctx(e.to_string()))?,
                "epsilon" => cfg.epsilon = Some(num(value)?),
                "sigma" => cfg.sigma = Some(num(value)?),
                "delta" => cfg.delta = num(value)?,
                "delta_split" => cfg.delta_split = num(value)?,
                "seed" => cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| ctx(e.to_string()))?,
                "noise_scaling" => cfg.noise_scaling = value.parse().map_err(|e: Error| ctx(e.to_string()))?,
                "posterior_samples" => cfg.posterior_samples = int(value)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }

        let need = |i: usize, name: &str, paths: &mut [Option<PathBuf>; 6]| {
            paths[i]
                .take()
                .ok_or_else(|| Error::Config(format!("missing required key {name}")))
        };
        cfg.dataset = match kind.as_deref() {
            Some("digits") => {
                if paths[2..].iter().any(Option::is_some) {
                    return Err(Error::Config("IDX paths given for the digits dataset".into()));
                }
                DatasetSource::Digits {
                    train: need(0, "train_path", &mut paths)?,
                    test: need(1, "test_path", &mut paths)?,
                }
            }
            Some("mnist") if seen_mnist_defaults => {
                if paths[..2].iter().any(Option::is_some) {
                    return Err(Error::Config("CSV paths given for the mnist dataset".into()));
                }
                DatasetSource::Mnist {
                    train_images: need(2, "train_images", &mut paths)?,
                    train_labels: need(3, "train_labels", &mut paths)?,
                    test_images: need(4, "test_images", &mut paths)?,
                    test_labels: need(5, "test_labels", &mut paths)?,
                }
            }
            Some(other) => return Err(Error::Config(format!("unknown dataset {other:?} (expected digits or mnist)"))),
            None => return Err(Error::Config("missing required key dataset".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for TrainConfig {
    /// Writes the config in the same format [`TrainConfig::parse`] reads.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.dataset {
            DatasetSource::Digits { train, test } => {
                writeln!(f, "dataset = digits")?;
                writeln!(f, "train_path = {}", train.display())?;
                writeln!(f, "test_path = {}", test.display())?;
            }
            DatasetSource::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                writeln!(f, "dataset = mnist")?;
                writeln!(f, "train_images = {}", train_images.display())?;
                writeln!(f, "train_labels = {}", train_labels.display())?;
                writeln!(f, "test_images = {}", test_images.display())?;
                writeln!(f, "test_labels = {}", test_labels.display())?;
            }
        }
        writeln!(f, "hidden_units = {}", self.hidden_units)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "clip_threshold = {}", self.clip_threshold)?;
        writeln!(f, "eta0 = {}", self.schedule.eta0)?;
        writeln!(f, "gamma = {}", self.schedule.gamma)?;
        writeln!(f, "prior_precision = {}", self.prior_precision)?;
        writeln!(f, "method = {}", self.accounting)?;
        if let Some(e) = self.epsilon {
            writeln!(f, "epsilon = {e}")?;
        }
        if let Some(s) = self.sigma {
            writeln!(f, "sigma = {s}")?;
        }
        writeln!(f, "delta = {}", self.delta)?;
        writeln!(f, "delta_split = {}", self.delta_split)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "noise_scaling = {}", self.noise_scaling)?;
        writeln!(f, "posterior_samples = {}", self.posterior_samples)
    }
}
