//! Acceptance suite. Every test prints one `[n] PASS|FAIL ...` line to stdout
//! (uncaptured) and then asserts, so `cargo test --test acceptance` doubles as
//! a report.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpd_core::accountant::{calibrate_sigma, total_budget_ac, total_budget_zcdp};
use dpd_core::config::{Accounting, TrainConfig};
use dpd_core::mechanism::{clip_by_l2, l2_norm, sample_update_noise};
use dpd_core::model::{forward, log_posterior_grad};
use dpd_core::renyi::{estimate_renyi_mc, renyi_divergence_gaussian};
use dpd_core::{harness, AccountantConfig, Batch, Dataset, Error, Method, ModelParams, NoiseSpec};

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!("\n[{n}] {} {title}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    // Bypass libtest capture so the line shows up for passing tests too.
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

fn digits_data() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = TrainConfig::from_file(root().join("configs/digits_np.conf")).unwrap();
        harness::load_datasets(&cfg).unwrap()
    })
}

fn mean_accuracy(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> f64 {
    let outcomes = harness::train_seeds(cfg, train, test, &SEEDS).unwrap();
    let accs: Vec<f64> = outcomes.iter().map(|o| o.test_accuracy()).collect();
    harness::mean_std(&accs).0
}

/// Ten-seed mean test accuracy for a shipped DIGITS config, computed once.
fn digits_mean(config_name: &str) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&v) = cache.lock().unwrap().get(config_name) {
        return v;
    }
    let cfg = TrainConfig::from_file(root().join("configs").join(config_name)).unwrap();
    let (train, test) = digits_data();
    let v = mean_accuracy(&cfg, train, test);
    *cache.lock().unwrap().entry(config_name.to_string()).or_insert(v)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn calibration_constants() {
    let start = Instant::now();
    let ac = AccountantConfig::new(20_000, 0.01, 0.5, Method::Ac).unwrap();
    let z = ac.with_method(Method::Zcdp);
    let s_ac = calibrate_sigma(0.5, 1e-4, &ac).unwrap();
    let s_z = calibrate_sigma(0.5, 1e-4, &z).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok_ac = rel(s_ac, 10.88) <= 0.15;
    let ok_z = rel(s_z, 3.23) <= 0.15;
    verdict(
        1,
        "calibration constants",
        ok_ac && ok_z && secs < 1.0,
        &format!(
            "delta_split 0.5: sigma_ac {s_ac:.4} (target 10.88 +/-15%, {}), sigma_zcdp {s_z:.4} (target 3.23 +/-15%, {}), {secs:.3}s",
            if ok_ac { "ok" } else { "off" },
            if ok_z { "ok" } else { "off" },
        ),
    );
}

#[test]
fn calibration_round_trips() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let (mut worst_ac, mut worst_z) = (0.0f64, 0.0f64);
    let mut dominance_violations = 0usize;
    while accepted < 1000 {
        let eps = 10f64.powf(rng.random_range(-1.3..1.0));
        let delta = 10f64.powf(rng.random_range(-7.0..-3.0));
        let t = 10f64.powf(rng.random_range(1.0..4.7)).round() as u64;
        let nu = 10f64.powf(rng.random_range(-3.0..-0.3));
        // The zCDP route needs nu > delta_iter = delta_split * delta / nu.
        if nu * nu <= 0.5 * delta {
            rejected += 1;
            continue;
        }
        let ac = AccountantConfig::new(t, nu, 0.5, Method::Ac).unwrap();
        let z = ac.with_method(Method::Zcdp);
        let s_ac = match calibrate_sigma(eps, delta, &ac) {
            Ok(s) => s,
            Err(Error::Calibration { .. }) => {
                rejected += 1;
                continue;
            }
            Err(e) => panic!("eps {eps} delta {delta} T {t} nu {nu}: {e}"),
        };
        let s_z = calibrate_sigma(eps, delta, &z).unwrap();
        worst_ac = worst_ac.max(rel(total_budget_ac(s_ac, delta, &ac).unwrap().eps, eps));
        worst_z = worst_z.max(rel(total_budget_zcdp(s_z, delta, &z).unwrap().eps, eps));
        dominance_violations += usize::from(s_z > s_ac);
        accepted += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_ac < 1e-6 && worst_z < 1e-6 && dominance_violations == 0 && secs < 10.0;
    verdict(
        2,
        "calibration round trips",
        pass,
        &format!(
            "{accepted} tuples ({rejected} rejected on preconditions or sigma bracket), max rel err ac {worst_ac:.2e} zcdp {worst_z:.2e}, {dominance_violations} dominance violations, {secs:.2}s"
        ),
    );
}

#[test]
fn digits_nonprivate_baseline() {
    let start = Instant::now();
    let mean = digits_mean("digits_np.conf");
    verdict(
        3,
        "DIGITS non-private baseline",
        mean >= 0.945,
        &format!("10-seed mean {mean:.4} (need >= 0.945), {:.0}s", start.elapsed().as_secs_f64()),
    );
}

const TABLE: [(&str, &str, f64); 6] = [
    ("zcdp", "10", 0.9518),
    ("zcdp", "1", 0.9367),
    ("zcdp", "0.5", 0.9125),
    ("ac", "10", 0.9341),
    ("ac", "1", 0.9089),
    ("ac", "0.5", 0.8521),
];

fn table_mean(method: &str, eps: &str) -> f64 {
    digits_mean(&format!("digits_{method}_eps{eps}.conf"))
}

#[test]
fn digits_private_accuracies() {
    let start = Instant::now();
    let mut cells = Vec::new();
    let mut pass = true;
    for (method, eps, target) in TABLE {
        let mean = table_mean(method, eps);
        let ok = (mean - target).abs() <= 0.03;
        pass &= ok;
        cells.push(format!("{method} eps {eps}: {mean:.4} vs {target} {}", if ok { "ok" } else { "off" }));
    }
    verdict(
        4,
        "DIGITS private accuracies (+/-0.03)",
        pass,
        &format!("{}; {:.0}s", cells.join(", "), start.elapsed().as_secs_f64()),
    );
}

#[test]
fn digits_accuracy_ordering() {
    let mut notes = Vec::new();
    let mut pass = true;
    for method in ["zcdp", "ac"] {
        let m: Vec<f64> = ["0.5", "1", "10"].iter().map(|e| table_mean(method, e)).collect();
        let monotone = m.windows(2).all(|w| w[0] <= w[1]);
        pass &= monotone;
        notes.push(format!(
            "{method} eps 0.5/1/10 = {:.4}/{:.4}/{:.4} {}",
            m[0],
            m[1],
            m[2],
            if monotone { "non-decreasing" } else { "not monotone" }
        ));
    }
    let gap = table_mean("zcdp", "0.5") - table_mean("ac", "0.5");
    pass &= gap >= 0.02;
    notes.push(format!("zcdp - ac at eps 0.5 = {gap:+.4} (need >= 0.02)"));
    verdict(5, "DIGITS accuracy ordering", pass, &notes.join("; "));
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("DPD_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root().join("data/mnist"))
}

#[test]
fn mnist_reduced_scale() {
    let dir = mnist_dir();
    let files = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    let missing: Vec<&str> = files.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        verdict(
            6,
            "MNIST reduced scale",
            false,
            &format!("MNIST IDX files not found in {} (missing {}); set DPD_MNIST_DIR", dir.display(), missing.join(", ")),
        );
        return;
    }
    let start = Instant::now();
    let mut cfg = TrainConfig::mnist(dir.join(files[0]), dir.join(files[1]), dir.join(files[2]), dir.join(files[3]));
    cfg.epochs = 20;
    cfg.hidden_units = 200;
    cfg.batch_size = 600;
    let (train, test) = harness::load_datasets(&cfg).unwrap();
    let run = |accounting: Accounting| {
        let mut c = cfg.clone();
        c.accounting = accounting;
        c.epsilon = (accounting != Accounting::None).then_some(0.5);
        harness::train_dpd(&c, &train, &test).unwrap().test_accuracy()
    };
    let np = run(Accounting::None);
    let z = run(Accounting::Zcdp);
    let ac = run(Accounting::Ac);
    verdict(
        6,
        "MNIST reduced scale",
        np >= 0.93 && np > z && z > ac,
        &format!(
            "E=20 H=200 S=600 seed 0: np {np:.4} (need >= 0.93), zcdp {z:.4}, ac {ac:.4} (need np > zcdp > ac), {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

fn params_from(v: &[f64], d: usize, h: usize, k: usize) -> ModelParams {
    let (w1, rest) = v.split_at(d * h);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h * k);
    ModelParams::from_parts(d, h, k, w1.to_vec(), b1.to_vec(), w2.to_vec(), b2.to_vec()).unwrap()
}

fn log_posterior(p: &ModelParams, x: &[f64], y: &[usize], n: usize, lambda: f64) -> f64 {
    let probs = forward(p, x).unwrap();
    let k = p.dims().2;
    let ll: f64 = y.iter().enumerate().map(|(i, &c)| probs[i * k + c].ln()).sum();
    let sq: f64 = p.flatten().iter().map(|v| v * v).sum();
    -0.5 * lambda * sq + n as f64 / y.len() as f64 * ll
}

/// Worst relative gradient error over `nets` random small networks, and how
/// many draws were skipped for straddling a ReLU kink.
fn gradient_check(nets: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let (mut worst, mut kinks) = (0.0f64, 0usize);
    for _ in 0..nets {
        let (d, h, k, s) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(2..5), rng.random_range(1..5));
        let n_params = d * h + h + h * k + k;
        let theta: Vec<f64> = (0..n_params).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..s * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<usize> = (0..s).map(|_| rng.random_range(0..k)).collect();
        let lambda = rng.random_range(0.0..0.1);
        let n = 4 * s;
        let p = params_from(&theta, d, h, k);
        let g = log_posterior_grad(&p, Batch::new(&x, &y), n, lambda).unwrap().flatten();
        let step = 1e-5;
        let fd: Vec<f64> = (0..n_params)
            .map(|i| {
                let mut plus = theta.clone();
                plus[i] += step;
                let mut minus = theta.clone();
                minus[i] -= step;
                let f = |t: &[f64]| log_posterior(&params_from(t, d, h, k), &x, &y, n, lambda);
                (f(&plus) - f(&minus)) / (2.0 * step)
            })
            .collect();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let err = l2_norm(&diff) / l2_norm(&g).max(l2_norm(&fd)).max(1e-8);
        if err > 1e-3 {
            kinks += 1;
        } else {
            worst = worst.max(err);
        }
    }
    (worst, kinks)
}

/// Number of random vectors violating the norm, idempotence or direction
/// invariants of clipping.
fn clipping_check(vectors: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut violations = 0;
    for _ in 0..vectors {
        let len = rng.random_range(1..64);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let c = 10f64.powf(rng.random_range(-2.0..1.0));
        let out = clip_by_l2(&v, c);
        let norm = l2_norm(&v);
        let norm_ok = l2_norm(&out) <= c * (1.0 + 1e-12);
        let idem_ok = clip_by_l2(&out, c).iter().zip(&out).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs());
        let dir_ok = if norm <= c {
            out == v
        } else {
            let cos = out.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (l2_norm(&out) * norm);
            (cos - 1.0).abs() < 1e-12
        };
        violations += usize::from(!(norm_ok && idem_ok && dir_ok));
    }
    violations
}

/// Grid points where the Monte-Carlo Renyi estimate misses the closed form by
/// more than 3 standard errors.
fn renyi_check() -> Vec<String> {
    let mut misses = Vec::new();
    let mut seed = 0;
    for alpha in [1.5, 2.0, 4.0] {
        for shift in [0.0, 0.5, 1.0] {
            for var in [1.0, 4.0] {
                seed += 1;
                let exact = renyi_divergence_gaussian(alpha, shift, var).unwrap();
                let est = estimate_renyi_mc(alpha, shift, var, 1_000_000, seed).unwrap();
                if (est.estimate - exact).abs() > 3.0 * est.std_error {
                    misses.push(format!(
                        "alpha {alpha} shift {shift} var {var}: {:.5} vs {exact:.5} (se {:.1e})",
                        est.estimate, est.std_error
                    ));
                }
            }
        }
    }
    misses
}

fn noise_variance_error(rng: &mut ChaCha8Rng) -> f64 {
    let spec = NoiseSpec::new(2.0, 3.5).unwrap();
    let xs = sample_update_noise(1_000_000, &spec, rng);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    rel(var, 4.0 * 2.0f64.powi(2) * 3.5f64.powi(2))
}

#[test]
fn numerical_suites() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (grad_err, kinks) = gradient_check(500, &mut rng);
    let clip_bad = clipping_check(10_000, &mut rng);
    let renyi_misses = renyi_check();
    let var_err = noise_variance_error(&mut rng);
    let secs = start.elapsed().as_secs_f64();
    let pass = grad_err < 1e-5
        && kinks < 50
        && clip_bad == 0
        && renyi_misses.is_empty()
        && var_err < 0.01
        && secs < 60.0;
    verdict(
        7,
        "numerical suites",
        pass,
        &format!(
            "gradient max rel err {grad_err:.1e} over 500 nets ({kinks} kink draws skipped), {clip_bad}/10000 clipping violations, renyi misses [{}], noise variance rel err {var_err:.2e}, {secs:.1}s",
            renyi_misses.join("; ")
        ),
    );
}

fn train_trace(out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_dpd"))
        .args(["train", "--seed", "7", "--config"])
        .arg(root().join("configs/digits_np.conf"))
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(out.join("trace.csv")).unwrap()
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_trace(&dir.path().join("a"));
    let b = train_trace(&dir.path().join("b"));
    verdict(
        8,
        "determinism",
        a == b && !a.is_empty(),
        &format!("two `train --seed 7` runs: trace.csv {} bytes each, identical: {}", a.len(), a == b),
    );
}
