//! Command line for the surface benchmark: the multi-regime accuracy run,
//! the noise and backbone sensitivity sweeps, and a standalone fit path for
//! external quote files. Parallelism is capped by `IVSFORGE_THREADS`; BLAS
//! is pinned to one thread because the workload parallelizes across presets
//! and maturity slices, not inside the factorizations.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ivsforge::bench::{
    emit_outputs, fit_surface, format_error_table, run_bench, sweep_beta, sweep_noise,
    write_sweep_csv, ExperimentConfig, Method, SweepOutcome,
};
use ivsforge::diagnostics::{arbitrage_report, ButterflyOptions};
use ivsforge::market_data::{load_quotes_csv, MarketConfig, Task};
use ivsforge::sabr::linspace;
use ivsforge::Result;

#[derive(Parser)]
#[command(name = "ivsforge", version, about = "Implied vol surface benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full multi-regime benchmark and write its artifacts.
    Bench(BenchArgs),
    /// Synthetic-noise sensitivity sweep on the Base preset.
    SweepNoise(BenchArgs),
    /// Backbone-exponent sensitivity sweep on the Base preset.
    SweepBeta(BenchArgs),
    /// Fit one surface model to quotes from a CSV file (strike,maturity,iv).
    Fit(FitArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// JSON file with the full experiment configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated preset names, or "all".
    #[arg(long, value_delimiter = ',')]
    presets: Option<Vec<String>>,
    /// Comma-separated subset of sabr,gp,mtgp,spline.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Backbone exponent for slice calibration.
    #[arg(long)]
    beta: Option<f64>,
    /// Noise standard deviation of the synthetic source grid.
    #[arg(long)]
    sigma_syn: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Quote file with a strike,maturity,iv header row.
    #[arg(long)]
    quotes: PathBuf,
    /// One of sabr, gp, mtgp, spline.
    #[arg(long)]
    method: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Spot price the quotes were observed at.
    #[arg(long, default_value_t = 100.0)]
    s0: f64,
    /// Continuously compounded risk-free rate.
    #[arg(long, default_value_t = 0.03)]
    r: f64,
    /// Continuous dividend yield.
    #[arg(long, default_value_t = 0.01)]
    q: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma_syn: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn build_config(args: &BenchArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(presets) = &args.presets {
        cfg.presets = presets.clone();
    }
    if let Some(methods) = &args.methods {
        cfg.methods = methods.iter().map(|s| Method::from_str(s)).collect::<Result<Vec<_>>>()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(beta) = args.beta {
        cfg.beta = beta;
    }
    if let Some(sigma) = args.sigma_syn {
        cfg.sigma_syn = sigma;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let config = build_config(args)?;
    let result = run_bench(&config)?;
    emit_outputs(&result, None, None, &config.output_dir)?;
    print!("{}", format_error_table(&result));
    if !result.failures.is_empty() {
        eprintln!(
            "{} cell(s) failed; see {}",
            result.failures.len(),
            config.output_dir.join("failures.csv").display()
        );
    }
    println!("artifacts written to {}", config.output_dir.display());
    Ok(())
}

fn print_sweep(sweep: &SweepOutcome, level_name: &str) {
    println!("{level_name:>10}   method   rmse x 10^-3    mae x 10^-3");
    for r in &sweep.rows {
        println!(
            "{:>10} {:>8} {:>14.2} {:>14.2}",
            r.level,
            r.method.as_str(),
            r.rmse * 1e3,
            r.mae * 1e3
        );
    }
}

fn cmd_sweep(args: &BenchArgs, beta_sweep: bool) -> Result<()> {
    let config = build_config(args)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let (sweep, level_name, file) = if beta_sweep {
        (sweep_beta(&config)?, "beta", "sweep_beta.csv")
    } else {
        (sweep_noise(&config)?, "sigma_syn", "sweep_noise.csv")
    };
    let path = config.output_dir.join(file);
    write_sweep_csv(&sweep, level_name, &path)?;
    print_sweep(&sweep, level_name);
    for f in &sweep.failures {
        eprintln!("failed: {} {} at {}: {}", f.preset, f.stage, f.method.map(|m| m.as_str()).unwrap_or("-"), f.reason);
    }
    println!("table written to {}", path.display());
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let method = Method::from_str(&args.method)?;
    let cfg = MarketConfig { s0: args.s0, r: args.r, q: args.q };
    cfg.validate()?;
    let target = load_quotes_csv(&args.quotes, Task::Target)?;
    let (surface, diag, ts) =
        fit_surface(method, &target, &cfg, args.beta, args.sigma_syn, args.seed)?;
    std::fs::create_dir_all(&args.out)?;

    // Plot grid spanning the data: 61 strikes per observed expiry.
    let (mut klo, mut khi) = (f64::INFINITY, f64::NEG_INFINITY);
    for q in target.quotes() {
        klo = klo.min(q.strike);
        khi = khi.max(q.strike);
    }
    let strikes = linspace(klo, khi, 61);
    let taus = target.maturities();
    let mut text = String::from("strike,maturity,iv\n");
    for &tau in &taus {
        for &k in &strikes {
            text.push_str(&format!("{},{},{}\n", k, tau, surface(k, tau)));
        }
    }
    let surface_path = args.out.join("surface.csv");
    std::fs::write(&surface_path, text)?;
    println!(
        "fitted {} to {} quotes over {} expiries; surface written to {}",
        method,
        target.len(),
        taus.len(),
        surface_path.display()
    );

    if let Some(ts) = &ts {
        let ts_path = args.out.join("term_structure.csv");
        ts.write_csv(&ts_path)?;
        println!("calibrated parameters written to {}", ts_path.display());
    }
    if let Some(diag) = &diag {
        let mut json = serde_json::to_string_pretty(diag)
            .map_err(|e| ivsforge::IvsError::Numerical { message: e.to_string() })?;
        json.push('\n');
        let diag_path = args.out.join("task_diag.json");
        std::fs::write(&diag_path, json)?;
        println!(
            "task correlation {:.3}; diagnostics written to {}",
            diag.cross_correlation,
            diag_path.display()
        );
    }

    if taus.len() >= 2 {
        let opts = ButterflyOptions { strike_range: (klo, khi), ..ButterflyOptions::default() };
        let k_grid = linspace((klo / cfg.s0).ln(), (khi / cfg.s0).ln(), 41);
        let report = arbitrage_report(&surface, &cfg, &taus, &k_grid, &taus, &opts)?;
        let mut json = serde_json::to_string_pretty(&report)
            .map_err(|e| ivsforge::IvsError::Numerical { message: e.to_string() })?;
        json.push('\n');
        let arb_path = args.out.join("arb_report.json");
        std::fs::write(&arb_path, json)?;
        let worst = report
            .butterfly_rates
            .iter()
            .map(|&(_, r)| r)
            .fold(0.0_f64, f64::max);
        println!(
            "worst butterfly violation rate {:.4}, calendar violations {}; report written to {}",
            worst,
            report.calendar_violations,
            arb_path.display()
        );
    } else {
        log::info!("single expiry: skipping the calendar check");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Bench(args) => cmd_bench(args),
        Command::SweepNoise(args) => cmd_sweep(args, false),
        Command::SweepBeta(args) => cmd_sweep(args, true),
        Command::Fit(args) => cmd_fit(args),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    // The harness parallelizes across presets and slices; a threaded BLAS
    // underneath would oversubscribe the cores.
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    if let Some(threads) = std::env::var_os("IVSFORGE_THREADS") {
        match threads.to_string_lossy().parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("could not configure {n} threads: {e}");
                    return ExitCode::FAILURE;
                }
            }
            _ => {
                eprintln!("IVSFORGE_THREADS must be a positive integer");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
