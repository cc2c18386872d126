//! Single-hidden-layer ReLU + softmax classifier with the SGLD log-posterior
//! gradient and update.
//!
//! Weight matrices are stored row-major: `hidden_weights[i * H + j]` connects
//! input `i` to hidden unit `j`, `output_weights[j * K + k]` connects hidden
//! unit `j` to class `k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    d_in: usize,
    hidden: usize,
    classes: usize,
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(d_in: usize, hidden: usize, classes: usize) -> Self {
        Self {
            d_in,
            hidden,
            classes,
            hidden_weights: vec![0.0; d_in * hidden],
            hidden_bias: vec![0.0; hidden],
            output_weights: vec![0.0; hidden * classes],
            output_bias: vec![0.0; classes],
        }
    }

    /// Builds parameters from explicit blocks, checking every length.
    pub fn from_parts(
        d_in: usize,
        hidden: usize,
        classes: usize,
        hidden_weights: Vec<f64>,
        hidden_bias: Vec<f64>,
        output_weights: Vec<f64>,
        output_bias: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            d_in,
            hidden,
            classes,
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        };
        p.check_shape()?;
        if p.layers().iter().any(|l| l.iter().any(|x| !x.is_finite())) {
            return Err(Error::domain("parameters must be finite"));
        }
        Ok(p)
    }

    fn check_shape(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Shape("dimensions must be >= 1".into()));
        }
        let want = [
            self.d_in * self.hidden,
            self.hidden,
            self.hidden * self.classes,
            self.classes,
        ];
        for (name, (layer, n)) in ["hidden_weights", "hidden_bias", "output_weights", "output_bias"]
            .iter()
            .zip(self.layers().iter().zip(want))
        {
            if layer.len() != n {
                return Err(Error::Shape(format!("{name} has {} entries, expected {n}", layer.len())));
            }
        }
        Ok(())
    }

    /// `(D, H, K)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_in, self.hidden, self.classes)
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    /// Parameter blocks in checkpoint order.
    pub fn layers(&self) -> [&[f64]; 4] {
        [
            &self.hidden_weights,
            &self.hidden_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.hidden_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers().concat()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    fn require_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what} has dims {:?}, parameters have {:?}",
                other.dims(),
                self.dims()
            )))
        }
    }

    fn zip_apply(&mut self, other: &Self, f: impl Fn(&mut f64, f64)) {
        for (dst, src) in self.layers_mut().into_iter().zip(other.layers()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| f(d, s));
        }
    }
}

/// Fan-in scaled Gaussian initialization: weights `N(0, 2 / fan_in)`, zero
/// biases.
pub fn init_params(d_in: usize, hidden: usize, classes: usize, seed: u64) -> Result<ModelParams> {
    if d_in == 0 || hidden == 0 || classes == 0 {
        return Err(Error::Shape("dimensions must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(d_in, hidden, classes);
    let w1 = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("positive std");
    let w2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).expect("positive std");
    p.hidden_weights.iter_mut().for_each(|w| *w = w1.sample(&mut rng));
    p.output_weights.iter_mut().for_each(|w| *w = w2.sample(&mut rng));
    Ok(p)
}

/// Numerically stable softmax of one row of logits, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn check_inputs(params: &ModelParams, features: &[f64]) -> Result<usize> {
    let d = params.d_in;
    if !features.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "feature buffer of length {} is not a multiple of input dim {d}",
            features.len()
        )));
    }
    Ok(features.len() / d)
}

/// Hidden pre-activations for one input row.
fn hidden_preactivation(params: &ModelParams, x: &[f64], out: &mut [f64]) {
    let h = params.hidden;
    out.copy_from_slice(&params.hidden_bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            let row = &params.hidden_weights[i * h..(i + 1) * h];
            out.iter_mut().zip(row).for_each(|(o, &w)| *o += xi * w);
        }
    }
}

fn logits_from_hidden(params: &ModelParams, act: &[f64], out: &mut [f64]) {
    let k = params.classes;
    out.copy_from_slice(&params.output_bias);
    for (j, &a) in act.iter().enumerate() {
        if a != 0.0 {
            let row = &params.output_weights[j * k..(j + 1) * k];
            out.iter_mut().zip(row).for_each(|(o, &w)| *o += a * w);
        }
    }
}

/// Class probabilities `softmax(W2^T relu(W1^T x + b1) + b2)` for every row
/// of the row-major `features` buffer, returned row-major `n x K`.
pub fn forward(params: &ModelParams, features: &[f64]) -> Result<Vec<f64>> {
    let n = check_inputs(params, features)?;
    let (d, h, k) = params.dims();
    let mut out = vec![0.0; n * k];
    let mut act = vec![0.0; h];
    for (x, probs) in features.chunks_exact(d).zip(out.chunks_exact_mut(k)) {
        hidden_preactivation(params, x, &mut act);
        act.iter_mut().for_each(|a| *a = a.max(0.0));
        logits_from_hidden(params, &act, probs);
        softmax_in_place(probs);
    }
    Ok(out)
}

/// Gradient of the Gaussian log-prior `-(precision / 2) ||theta||^2`.
pub fn log_prior_grad(params: &ModelParams, prior_precision: f64) -> Gradients {
    let mut g = params.clone();
    for layer in g.layers_mut() {
        layer.iter_mut().for_each(|x| *x *= -prior_precision);
    }
    g
}

/// Gradient of `log p(theta) + (N / S) sum_i log p(y_i | x_i, theta)` over
/// the minibatch, with an isotropic Gaussian prior of the given precision.
pub fn log_posterior_grad(
    params: &ModelParams,
    batch: Batch<'_>,
    dataset_size: usize,
    prior_precision: f64,
) -> Result<Gradients> {
    let s = batch.len();
    if s == 0 {
        return Err(Error::domain("minibatch is empty"));
    }
    if dataset_size < s {
        return Err(Error::domain(format!(
            "dataset size {dataset_size} is smaller than the batch size {s}"
        )));
    }
    if prior_precision.is_nan() || prior_precision < 0.0 {
        return Err(Error::domain("prior precision must be >= 0"));
    }
    let n = check_inputs(params, batch.features)?;
    if n != s {
        return Err(Error::Shape(format!("{n} feature rows but {s} labels")));
    }
    let (d, h, k) = params.dims();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(Error::domain(format!("label {bad} out of range for {k} classes")));
    }

    let mut g = ModelParams::zeros(d, h, k);
    let mut pre = vec![0.0; h];
    let mut act = vec![0.0; h];
    let mut dlogit = vec![0.0; k];
    let mut dhidden = vec![0.0; h];

    for (x, &y) in batch.features.chunks_exact(d).zip(batch.labels) {
        hidden_preactivation(params, x, &mut pre);
        act.iter_mut().zip(&pre).for_each(|(a, &z)| *a = z.max(0.0));
        logits_from_hidden(params, &act, &mut dlogit);
        softmax_in_place(&mut dlogit);
        // d log p(y|x) / d logits = onehot(y) - p
        dlogit.iter_mut().for_each(|v| *v = -*v);
        dlogit[y] += 1.0;

        g.output_bias.iter_mut().zip(&dlogit).for_each(|(b, &dl)| *b += dl);
        for j in 0..h {
            let row = &params.output_weights[j * k..(j + 1) * k];
            dhidden[j] = if pre[j] > 0.0 {
                row.iter().zip(&dlogit).map(|(w, dl)| w * dl).sum()
            } else {
                0.0
            };
            let a = act[j];
            if a != 0.0 {
                let grow = &mut g.output_weights[j * k..(j + 1) * k];
                grow.iter_mut().zip(&dlogit).for_each(|(gw, &dl)| *gw += a * dl);
            }
        }
        g.hidden_bias.iter_mut().zip(&dhidden).for_each(|(b, &dh)| *b += dh);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let grow = &mut g.hidden_weights[i * h..(i + 1) * h];
                grow.iter_mut().zip(&dhidden).for_each(|(gw, &dh)| *gw += xi * dh);
            }
        }
    }

    let scale = dataset_size as f64 / s as f64;
    for (gl, pl) in g.layers_mut().into_iter().zip(params.layers()) {
        gl.iter_mut()
            .zip(pl)
            .for_each(|(gv, &p)| *gv = scale * *gv - prior_precision * p);
    }
    Ok(g)
}

/// `theta + (eta / 2) (grad + noise)`.
pub fn sgld_update(params: &ModelParams, clipped_grads: &Gradients, noise: &Gradients, eta: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    sgld_update_in_place(&mut next, clipped_grads, noise, eta)?;
    Ok(next)
}

pub fn sgld_update_in_place(params: &mut ModelParams, clipped_grads: &Gradients, noise: &Gradients, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::domain(format!("step size must be positive, got {eta}")));
    }
    params.require_same_shape(clipped_grads, "gradient")?;
    params.require_same_shape(noise, "noise")?;
    let half = 0.5 * eta;
    params.zip_apply(clipped_grads, |p, g| *p += half * g);
    params.zip_apply(noise, |p, xi| *p += half * xi);
    Ok(())
}

/// Learning-rate decay `eta_t = eta0 / t^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub eta0: f64,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn new(eta0: f64, gamma: f64) -> Result<Self> {
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return Err(Error::domain(format!("eta0 must be positive, got {eta0}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::domain(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { eta0, gamma })
    }

    pub fn step_size(&self, t: u64) -> Result<f64> {
        if t == 0 {
            return Err(Error::domain("iteration index starts at 1"));
        }
        Ok(self.eta0 / (t as f64).powf(self.gamma))
    }
}

/// Index of the largest entry, ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `probs` whose argmax equals the label.
pub fn accuracy_of_predictions(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("cannot score an empty dataset"));
    }
    if probs.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels and {classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    let correct = probs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn evaluate_accuracy(params: &ModelParams, data: Batch<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("cannot score an empty dataset"));
    }
    let probs = forward(params, data.features)?;
    accuracy_of_predictions(&probs, params.classes, data.labels)
}

/// Monte-Carlo posterior predictive: the mean of the forward outputs of
/// every parameter sample.
pub fn posterior_predictive(param_samples: &[ModelParams], features: &[f64]) -> Result<Vec<f64>> {
    let (first, rest) = param_samples
        .split_first()
        .ok_or_else(|| Error::domain("posterior predictive needs at least one sample"))?;
    let mut mean = forward(first, features)?;
    for p in rest {
        first.require_same_shape(p, "posterior sample")?;
        let probs = forward(p, features)?;
        mean.iter_mut().zip(probs).for_each(|(m, q)| *m += q);
    }
    let t = param_samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    Ok(mean)
}
