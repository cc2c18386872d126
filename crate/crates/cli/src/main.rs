use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dpd_core::accountant::{self, AccountantConfig, DEFAULT_DELTA_SPLIT};
use dpd_core::config::TrainConfig;
use dpd_core::{checkpoint, dataset, harness, model, Method};

#[derive(Parser)]
#[command(name = "dpd", version, about = "Differentially private dropout training and privacy accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ac,
    Zcdp,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ac => Method::Ac,
            MethodArg::Zcdp => Method::Zcdp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepMethod {
    Ac,
    Zcdp,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Noise multiplier for a total budget (or the budget of a given sigma), as JSON.
    #[command(group(ArgGroup::new("level").required(true).args(["epsilon", "sigma"])))]
    Calibrate {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        iterations: u64,
        #[arg(long)]
        sampling_ratio: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA_SPLIT)]
        delta_split: f64,
    },
    /// Train from a config file; writes trace.csv, report.json and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of runs with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        #[arg(long, default_value = "dpd-out")]
        out: PathBuf,
    },
    /// Test accuracy of a checkpoint.
    #[command(group(ArgGroup::new("data").required(true).args(["digits_csv", "idx_images"])))]
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        digits_csv: Option<PathBuf>,
        #[arg(long, requires = "idx_labels")]
        idx_images: Option<PathBuf>,
        #[arg(long, requires = "idx_images")]
        idx_labels: Option<PathBuf>,
    },
    /// Sigma as a function of eps for both accounting routes, as CSV.
    Sweep {
        #[arg(long, value_enum, default_value = "both")]
        method: SweepMethod,
        #[arg(long, value_delimiter = ',', required = true)]
        epsilon_list: Vec<f64>,
        #[arg(long)]
        iterations: u64,
        #[arg(long)]
        sampling_ratio: f64,
        #[arg(long, default_value_t = 1e-4)]
        delta: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA_SPLIT)]
        delta_split: f64,
    },
    /// Privacy report for a config without training.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    secs.to_string()
}

fn calibrate(
    method: Method,
    epsilon: Option<f64>,
    sigma: Option<f64>,
    delta: f64,
    iterations: u64,
    sampling_ratio: f64,
    delta_split: f64,
) -> CliResult {
    let cfg = AccountantConfig::new(iterations, sampling_ratio, delta_split, method)?;
    let sigma = match (epsilon, sigma) {
        (Some(eps), None) => accountant::calibrate_sigma(eps, delta, &cfg)?,
        (None, Some(s)) => s,
        _ => unreachable!("clap enforces exactly one"),
    };
    let b = accountant::breakdown(sigma, delta, &cfg)?;
    let out = json!({
        "method": method,
        "sigma": sigma,
        "iterations": iterations,
        "sampling_ratio": sampling_ratio,
        "delta_split": delta_split,
        "eps_iter": b.per_iteration.eps,
        "delta_iter": b.per_iteration.delta,
        "eps_amplified": b.amplified.eps,
        "delta_amplified": b.amplified.delta,
        "eps_tot": b.total.eps,
        "delta_tot": b.total.delta,
        "rho_total": b.rho_total,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, runs: u64, out: &Path) -> CliResult {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if runs == 0 {
        return Err("--runs must be at least 1".into());
    }
    let (train, test) = harness::load_datasets(&cfg)?;
    let seeds: Vec<u64> = (0..runs).map(|i| cfg.seed + i).collect();
    let outcomes = harness::train_seeds(&cfg, &train, &test, &seeds)?;

    let sigma = outcomes.first().and_then(|o| o.report.sigma);
    let mut accs = Vec::new();
    for (seed, mut outcome) in seeds.iter().zip(outcomes) {
        outcome.report.generated_at = Some(timestamp());
        let dir = if runs == 1 { out.to_path_buf() } else { out.join(format!("seed-{seed}")) };
        harness::write_outputs(&outcome, &dir)?;
        let acc = outcome.test_accuracy();
        println!("seed {seed}: test accuracy {acc:.4} -> {}", dir.display());
        accs.push(acc);
    }
    if let Some(s) = sigma {
        println!("sigma {s:.6}");
    }
    let (mean, std) = harness::mean_std(&accs);
    println!("mean test accuracy {mean:.4} +/- {std:.4} over {runs} run(s)");
    Ok(())
}

fn evaluate(ckpt: &Path, digits_csv: Option<&Path>, idx: Option<(&Path, &Path)>) -> CliResult {
    let params = checkpoint::load(ckpt)?;
    let data = match (digits_csv, idx) {
        (Some(p), _) => dataset::load_digits_file(p)?,
        (None, Some((images, labels))) => dataset::load_idx(images, labels)?,
        (None, None) => unreachable!("clap requires a data source"),
    };
    let acc = model::evaluate_accuracy(&params, data.as_batch())?;
    println!("{acc}");
    Ok(())
}

fn sweep(
    method: SweepMethod,
    eps: &[f64],
    iterations: u64,
    sampling_ratio: f64,
    delta: f64,
    delta_split: f64,
) -> CliResult {
    let cfg = AccountantConfig::new(iterations, sampling_ratio, delta_split, Method::Ac)?;
    let mut rows = harness::sweep_sigma_vs_eps(&cfg, delta, eps)?;
    for r in &mut rows {
        match method {
            SweepMethod::Ac => r.sigma_zcdp = Err("not requested".into()),
            SweepMethod::Zcdp => r.sigma_ac = Err("not requested".into()),
            SweepMethod::Both => {}
        }
        for (name, cell) in [("ac", &r.sigma_ac), ("zcdp", &r.sigma_zcdp)] {
            if let Err(msg) = cell {
                if msg != "not requested" {
                    eprintln!("eps {}: {name}: {msg}", r.eps);
                }
            }
        }
    }
    print!("{}", harness::sweep_to_csv(&rows));
    Ok(())
}

fn report(config: &Path) -> CliResult {
    let cfg = TrainConfig::from_file(config)?;
    let (train, _) = harness::load_datasets(&cfg)?;
    let mut r = harness::privacy_report(&cfg, train.n_examples())?;
    r.generated_at = Some(timestamp());
    println!("{}", r.to_json());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Calibrate {
            method,
            epsilon,
            sigma,
            delta,
            iterations,
            sampling_ratio,
            delta_split,
        } => calibrate(method.into(), epsilon, sigma, delta, iterations, sampling_ratio, delta_split),
        Command::Train { config, seed, runs, out } => train(&config, seed, runs, &out),
        Command::Evaluate {
            checkpoint,
            digits_csv,
            idx_images,
            idx_labels,
        } => evaluate(
            &checkpoint,
            digits_csv.as_deref(),
            idx_images.as_deref().zip(idx_labels.as_deref()),
        ),
        Command::Sweep {
            method,
            epsilon_list,
            iterations,
            sampling_ratio,
            delta,
            delta_split,
        } => sweep(method, &epsilon_list, iterations, sampling_ratio, delta, delta_split),
        Command::Report { config } => report(&config),
    }
}

fn main() -> ExitCode {
    // clap prints usage and exits with status 2 on bad flags.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
