//! End-to-end benchmark harness: prices ground-truth surfaces per regime,
//! builds the sparse market grid, calibrates the smile model, fits every
//! requested surface model and scores them against the truth, then emits
//! plot-ready artifacts.
//!
//! One pipeline run per regime preset:
//!
//!   Heston FFT → 166-contract market grid → per-slice SABR calibration →
//!   dense noisy synthetic grid → fit {sabr, gp, mtgp, spline} →
//!   RMSE/MAE on the eval lattice → butterfly and calendar checks.
//!
//! All randomness (synthetic noise, optimizer restarts) flows from the one
//! configured seed, so two runs with the same configuration are
//! bit-identical. Presets run in parallel; results are merged back in the
//! builtin preset order so the emitted files never depend on scheduling.
//!
//! The cubic-spline comparator interpolates each maturity slice with a
//! natural cubic spline in strike, blends linearly across maturities at
//! fixed strike, and extrapolates with the boundary value in both
//! coordinates.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::black_scholes::IvSolverConfig;
use crate::diagnostics::{butterfly_check, rmse_mae, total_variance_check, ButterflyOptions};
use crate::error::{IvsError, Result};
use crate::gp::{fit_gp, GpFitOptions};
use crate::heston::{builtin_presets, heston_iv_surface, FftConfig, RegimePreset};
use crate::market_data::{
    design_maturities, generate_market_design, MarketConfig, OptionQuote, QuoteSet,
};
use crate::mtgp::{fit_mtgp, MtgpFitOptions, TaskDiagnostics};
use crate::optim::NelderMeadOptions;
use crate::sabr::{
    calibrate_term_structure, generate_synthetic_dataset, linspace, surface_iv,
    CalibrationBounds, SabrTermStructure, SynthesisConfig,
};

/// Noise standard deviations visited by [`sweep_noise`].
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.005, 0.01, 0.015, 0.02];

/// Backbone exponents visited by [`sweep_beta`].
pub const BETA_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Surface construction methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sabr,
    Gp,
    Mtgp,
    Spline,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sabr, Method::Gp, Method::Mtgp, Method::Spline];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sabr => "sabr",
            Method::Gp => "gp",
            Method::Mtgp => "mtgp",
            Method::Spline => "spline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = IvsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sabr" => Ok(Method::Sabr),
            "gp" => Ok(Method::Gp),
            "mtgp" => Ok(Method::Mtgp),
            "spline" => Ok(Method::Spline),
            other => Err(IvsError::invalid(format!(
                "unknown method '{other}', expected one of sabr, gp, mtgp, spline"
            ))),
        }
    }
}

/// Full experiment description; also the schema of the JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Regime names, or the single entry "all" for every builtin preset.
    pub presets: Vec<String>,
    pub methods: Vec<Method>,
    pub eval_maturities: Vec<f64>,
    /// Moneyness grid per eval maturity: (lo, hi, points), strikes = m·S0.
    pub eval_moneyness: (f64, f64, usize),
    /// Backbone exponent used for slice calibration.
    pub beta: f64,
    /// Noise standard deviation of the synthetic source grid.
    pub sigma_syn: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            presets: vec!["all".to_string()],
            methods: Method::ALL.to_vec(),
            eval_maturities: vec![0.3, 0.9, 2.2],
            eval_moneyness: (0.8, 1.4, 61),
            beta: 0.5,
            sigma_syn: 0.01,
            seed: 42,
            output_dir: PathBuf::from("bench_out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() {
            return Err(IvsError::invalid("at least one preset is required"));
        }
        if self.methods.is_empty() {
            return Err(IvsError::invalid("at least one method is required"));
        }
        if self.eval_maturities.is_empty() {
            return Err(IvsError::invalid("at least one eval maturity is required"));
        }
        let taus = design_maturities();
        let (lo, hi) = (taus[0], taus[taus.len() - 1]);
        for &tau in &self.eval_maturities {
            if !(tau >= lo && tau <= hi) {
                return Err(IvsError::invalid(format!(
                    "eval maturity {tau} outside the market data range [{lo}, {hi}]"
                )));
            }
        }
        let (mlo, mhi, n) = self.eval_moneyness;
        if !(mlo > 0.0 && mhi > mlo) || n < 2 {
            return Err(IvsError::invalid(format!(
                "eval moneyness must satisfy 0 < lo < hi with at least 2 points, got ({mlo}, {mhi}, {n})"
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(IvsError::invalid(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(self.sigma_syn >= 0.0) || !self.sigma_syn.is_finite() {
            return Err(IvsError::invalid(format!(
                "sigma_syn must be non-negative, got {}",
                self.sigma_syn
            )));
        }
        self.resolve_presets().map(|_| ())
    }

    /// Expands "all" and validates names, returning presets in the builtin
    /// order regardless of how the request was spelled.
    pub fn resolve_presets(&self) -> Result<Vec<RegimePreset>> {
        let builtin = builtin_presets();
        if self.presets.iter().any(|p| p.eq_ignore_ascii_case("all")) {
            return Ok(builtin);
        }
        for name in &self.presets {
            if !builtin.iter().any(|p| p.name == *name) {
                return Err(IvsError::invalid(format!(
                    "unknown preset '{name}'; available: {}",
                    builtin.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(builtin.into_iter().filter(|p| self.presets.iter().any(|n| n == &p.name)).collect())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| IvsError::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One scored (preset, method, maturity) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub preset: String,
    pub method: Method,
    pub maturity: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Truth points the errors were computed over.
    pub count: usize,
    pub butterfly_rate: f64,
    /// Model fit time plus this maturity's evaluation time.
    pub wall_ms: u64,
}

/// A pipeline stage that failed for some cell; kept alongside the scored
/// cells so the requested cross product is always fully accounted for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub preset: String,
    /// None when the failed stage precedes any per-method work.
    pub method: Option<Method>,
    pub stage: String,
    pub reason: String,
}

/// Calendar-arbitrage count for one fitted surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarRow {
    pub preset: String,
    pub method: Method,
    pub violations: usize,
}

/// Fitted surface sampled on the rectangular eval lattice for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub preset: String,
    pub method: Method,
    /// (strike, maturity, iv) rows, maturity-major, strikes ascending.
    pub points: Vec<(f64, f64, f64)>,
}

/// Everything a benchmark run produces, before emission.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub cells: Vec<BenchCell>,
    pub calendar: Vec<CalendarRow>,
    pub failures: Vec<CellFailure>,
    pub task_diagnostics: Vec<(String, TaskDiagnostics)>,
    pub surfaces: Vec<SurfaceGrid>,
}

impl BenchResult {
    fn merge(&mut self, other: BenchResult) {
        self.cells.extend(other.cells);
        self.calendar.extend(other.calendar);
        self.failures.extend(other.failures);
        self.task_diagnostics.extend(other.task_diagnostics);
        self.surfaces.extend(other.surfaces);
    }
}

/// One row of a sensitivity sweep; `level` is σ_syn or β depending on the
/// sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: f64,
    pub method: Method,
    pub rmse: f64,
    pub mae: f64,
}

/// Sweep rows plus any per-cell failures, mirroring [`BenchResult`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<CellFailure>,
}

// The synthetic-noise stream of each preset is seeded by its position in
// the builtin list, so a run is reproducible no matter which subset of
// presets was requested or in what order the scheduler finished them.
fn preset_seed(base_seed: u64, name: &str) -> u64 {
    let idx = builtin_presets().iter().position(|p| p.name == name).unwrap_or(0);
    base_seed.wrapping_add(idx as u64)
}

fn sorted_eval_maturities(config: &ExperimentConfig) -> Vec<f64> {
    let mut taus = config.eval_maturities.clone();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    taus.dedup();
    taus
}

fn eval_strikes(cfg: &MarketConfig, config: &ExperimentConfig) -> Vec<f64> {
    let (lo, hi, n) = config.eval_moneyness;
    linspace(lo, hi, n).into_iter().map(|m| m * cfg.s0).collect()
}

/// Ground-truth slices for the eval lattice: (maturity, quotes) with
/// uninvertible contracts already dropped by the pricer.
fn eval_truth(
    preset: &RegimePreset,
    cfg: &MarketConfig,
    config: &ExperimentConfig,
) -> Result<Vec<(f64, Vec<OptionQuote>)>> {
    let strikes = eval_strikes(cfg, config);
    let taus = sorted_eval_maturities(config);
    let mut contracts = Vec::with_capacity(strikes.len() * taus.len());
    for &tau in &taus {
        for &k in &strikes {
            contracts.push((k, tau));
        }
    }
    let truth = heston_iv_surface(
        &preset.params,
        cfg,
        &contracts,
        &IvSolverConfig::default(),
        &FftConfig::default(),
    )?;
    Ok(taus.into_iter().map(|tau| (tau, truth.slice(tau))).collect())
}

/// A fitted surface as a plain (strike, maturity) → implied vol function.
pub type Surface = Box<dyn Fn(f64, f64) -> f64>;

fn fit_method(
    method: Method,
    target: &QuoteSet,
    source: Option<&QuoteSet>,
    ts: Option<&SabrTermStructure>,
    cfg: &MarketConfig,
    seed: u64,
) -> Result<(Surface, Option<TaskDiagnostics>)> {
    let cfg = *cfg;
    match method {
        Method::Sabr => {
            let ts = ts
                .ok_or_else(|| IvsError::invalid("sabr surface requested without calibration"))?
                .clone();
            Ok((Box::new(move |k, t| surface_iv(&ts, &cfg, k, t)), None))
        }
        Method::Gp => {
            let opts = GpFitOptions { seed, ..GpFitOptions::default() };
            let model = fit_gp(target, &cfg, &opts)?;
            Ok((Box::new(move |k, t| model.predict(&[(k, t)]).0[0]), None))
        }
        Method::Mtgp => {
            let source = source
                .ok_or_else(|| IvsError::invalid("mtgp requested without a source grid"))?;
            let opts = MtgpFitOptions { seed, ..MtgpFitOptions::default() };
            let model = fit_mtgp(source, target, &cfg, &opts)?;
            let diag = model.task_diagnostics();
            Ok((Box::new(move |k, t| model.predict_target(&[(k, t)]).0[0]), Some(diag)))
        }
        Method::Spline => {
            let spline = fit_spline_baseline(target)?;
            Ok((Box::new(move |k, t| spline.eval(k, t)), None))
        }
    }
}

/// Fits one method to standalone target quotes, building the smile
/// calibration and the synthetic source grid internally when the method
/// needs them. Returns the surface, the task diagnostics when the method
/// produces any, and the calibrated term structure when one was built.
pub fn fit_surface(
    method: Method,
    target: &QuoteSet,
    cfg: &MarketConfig,
    beta: f64,
    sigma_syn: f64,
    seed: u64,
) -> Result<(Surface, Option<TaskDiagnostics>, Option<SabrTermStructure>)> {
    let needs_ts = method == Method::Sabr || method == Method::Mtgp;
    let ts = if needs_ts {
        let (ts, _) = calibrate_term_structure(
            target,
            cfg,
            beta,
            &CalibrationBounds::default(),
            &NelderMeadOptions::default(),
        )?;
        Some(ts)
    } else {
        None
    };
    let source = match (&ts, method == Method::Mtgp) {
        (Some(ts), true) => {
            // Standalone quotes need not sit on the benchmark bands, so the
            // dense grid spans the data with a small margin instead.
            let (mut klo, mut khi) = (f64::INFINITY, f64::NEG_INFINITY);
            for q in target.quotes() {
                klo = klo.min(q.strike);
                khi = khi.max(q.strike);
            }
            let taus = target.maturities();
            let (tlo, thi) = (taus[0], taus[taus.len() - 1]);
            let syn = SynthesisConfig {
                noise_sd: sigma_syn,
                rng_seed: seed,
                strike_range: (0.95 * klo, 1.05 * khi),
                // A single-expiry target still gets a band to synthesize on.
                maturity_range: if tlo < thi { (tlo, thi) } else { (0.8 * tlo, 1.2 * tlo) },
                ..SynthesisConfig::default()
            };
            Some(generate_synthetic_dataset(ts, cfg, &syn)?)
        }
        _ => None,
    };
    let (surface, diag) = fit_method(method, target, source.as_ref(), ts.as_ref(), cfg, seed)?;
    Ok((surface, diag, ts))
}

/// Runs the whole pipeline for one preset. Stage failures are recorded per
/// affected cell and the remaining cells still run; the returned fragment
/// always accounts for the full method × maturity cross product.
pub fn run_pipeline(preset: &RegimePreset, config: &ExperimentConfig) -> BenchResult {
    let cfg = MarketConfig::default();
    let taus = sorted_eval_maturities(config);
    let mut out = BenchResult::default();

    let fail_all = |out: &mut BenchResult, methods: &[Method], stage: &str, reason: &str| {
        log::error!("preset {}: {stage} failed: {reason}", preset.name);
        for &m in methods {
            for _ in &taus {
                out.failures.push(CellFailure {
                    preset: preset.name.clone(),
                    method: Some(m),
                    stage: stage.to_string(),
                    reason: reason.to_string(),
                });
            }
        }
    };

    // Sparse market grid priced under the regime's ground truth.
    let contracts = generate_market_design(&cfg);
    let target = match heston_iv_surface(
        &preset.params,
        &cfg,
        &contracts,
        &IvSolverConfig::default(),
        &FftConfig::default(),
    ) {
        Ok(t) => t,
        Err(e) => {
            fail_all(&mut out, &config.methods, "ground_truth", &e.to_string());
            return out;
        }
    };

    let needs_ts = config.methods.iter().any(|&m| m == Method::Sabr || m == Method::Mtgp);
    let ts = if needs_ts {
        match calibrate_term_structure(
            &target,
            &cfg,
            config.beta,
            &CalibrationBounds::default(),
            &NelderMeadOptions::default(),
        ) {
            Ok((ts, _)) => Some(ts),
            Err(e) => {
                let affected: Vec<Method> = config
                    .methods
                    .iter()
                    .copied()
                    .filter(|&m| m == Method::Sabr || m == Method::Mtgp)
                    .collect();
                fail_all(&mut out, &affected, "sabr_calibration", &e.to_string());
                None
            }
        }
    } else {
        None
    };

    let needs_source = config.methods.contains(&Method::Mtgp);
    let source = match (&ts, needs_source) {
        (Some(ts), true) => {
            let syn = SynthesisConfig {
                noise_sd: config.sigma_syn,
                rng_seed: preset_seed(config.seed, &preset.name),
                ..SynthesisConfig::default()
            };
            match generate_synthetic_dataset(ts, &cfg, &syn) {
                Ok(s) => Some(s),
                Err(e) => {
                    fail_all(&mut out, &[Method::Mtgp], "synthesis", &e.to_string());
                    None
                }
            }
        }
        _ => None,
    };

    let truth = match eval_truth(preset, &cfg, config) {
        Ok(t) => t,
        Err(e) => {
            fail_all(&mut out, &config.methods, "eval_truth", &e.to_string());
            return out;
        }
    };

    let strikes = eval_strikes(&cfg, config);
    let (mlo, mhi, npts) = config.eval_moneyness;
    let k_grid: Vec<f64> = linspace(mlo.ln(), mhi.ln(), npts);

    for &method in &config.methods {
        // Skip methods whose prerequisite stage already failed; their cells
        // are covered by the recorded failures.
        if (method == Method::Sabr || method == Method::Mtgp) && ts.is_none() {
            continue;
        }
        if method == Method::Mtgp && source.is_none() {
            continue;
        }

        let fit_start = Instant::now();
        let (surface, diag) =
            match fit_method(method, &target, source.as_ref(), ts.as_ref(), &cfg, config.seed) {
                Ok(f) => f,
                Err(e) => {
                    fail_all(&mut out, &[method], "fit", &e.to_string());
                    continue;
                }
            };
        let fit_ms = fit_start.elapsed().as_millis() as u64;
        if let Some(d) = diag {
            out.task_diagnostics.push((preset.name.clone(), d));
        }

        for (tau, slice) in &truth {
            let eval_start = Instant::now();
            if slice.is_empty() {
                out.failures.push(CellFailure {
                    preset: preset.name.clone(),
                    method: Some(method),
                    stage: "eval_truth".to_string(),
                    reason: format!("no invertible truth prices at maturity {tau}"),
                });
                continue;
            }
            let preds: Vec<f64> = slice.iter().map(|q| surface(q.strike, q.maturity)).collect();
            let ivs: Vec<f64> = slice.iter().map(|q| q.iv).collect();
            let stats = match rmse_mae(&preds, &ivs) {
                Ok((s, _)) => s,
                Err(e) => {
                    out.failures.push(CellFailure {
                        preset: preset.name.clone(),
                        method: Some(method),
                        stage: "evaluation".to_string(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            let butterfly =
                match butterfly_check(&surface, &cfg, *tau, &ButterflyOptions::default()) {
                    Ok(b) => b,
                    Err(e) => {
                        out.failures.push(CellFailure {
                            preset: preset.name.clone(),
                            method: Some(method),
                            stage: "butterfly".to_string(),
                            reason: e.to_string(),
                        });
                        continue;
                    }
                };
            out.cells.push(BenchCell {
                preset: preset.name.clone(),
                method,
                maturity: *tau,
                rmse: stats.rmse,
                mae: stats.mae,
                count: stats.count,
                butterfly_rate: butterfly.rate,
                wall_ms: fit_ms + eval_start.elapsed().as_millis() as u64,
            });
        }

        if taus.len() >= 2 {
            match total_variance_check(&surface, &cfg, &k_grid, &taus) {
                Ok(cal) => out.calendar.push(CalendarRow {
                    preset: preset.name.clone(),
                    method,
                    violations: cal.violations,
                }),
                Err(e) => out.failures.push(CellFailure {
                    preset: preset.name.clone(),
                    method: Some(method),
                    stage: "calendar".to_string(),
                    reason: e.to_string(),
                }),
            }
        }

        let mut points = Vec::with_capacity(taus.len() * strikes.len());
        for &tau in &taus {
            for &k in &strikes {
                points.push((k, tau, surface(k, tau)));
            }
        }
        out.surfaces.push(SurfaceGrid { preset: preset.name.clone(), method, points });
    }

    out
}

/// Runs every requested preset in parallel and merges the fragments in the
/// builtin preset order.
pub fn run_bench(config: &ExperimentConfig) -> Result<BenchResult> {
    config.validate()?;
    let presets = config.resolve_presets()?;
    let fragments: Vec<BenchResult> =
        presets.par_iter().map(|p| run_pipeline(p, config)).collect();
    let mut result = BenchResult::default();
    for fragment in fragments {
        result.merge(fragment);
    }
    Ok(result)
}

fn base_preset() -> RegimePreset {
    builtin_presets().into_iter().find(|p| p.name == "Base").expect("Base preset exists")
}

// Pooled (all eval maturities) error statistics of one fitted surface.
fn overall_stats(
    surface: &Surface,
    truth: &[(f64, Vec<OptionQuote>)],
) -> Result<(f64, f64)> {
    let mut preds = Vec::new();
    let mut ivs = Vec::new();
    for (_, slice) in truth {
        for q in slice {
            preds.push(surface(q.strike, q.maturity));
            ivs.push(q.iv);
        }
    }
    let (stats, _) = rmse_mae(&preds, &ivs)?;
    Ok((stats.rmse, stats.mae))
}

// Shared scaffolding of the two sweeps: Base-preset target surface, its
// truth lattice, and a per-level method loop. `levels` carries
// (level, beta, noise_sd) so the β sweep can recalibrate while the noise
// sweep reuses one calibration.
fn sweep_impl(config: &ExperimentConfig, levels: &[(f64, f64, f64)]) -> Result<SweepOutcome> {
    config.validate()?;
    let preset = base_preset();
    let cfg = MarketConfig::default();
    let contracts = generate_market_design(&cfg);
    let target = heston_iv_surface(
        &preset.params,
        &cfg,
        &contracts,
        &IvSolverConfig::default(),
        &FftConfig::default(),
    )?;
    let truth = eval_truth(&preset, &cfg, config)?;
    let needs_ts = config.methods.iter().any(|&m| m == Method::Sabr || m == Method::Mtgp);
    let needs_source = config.methods.contains(&Method::Mtgp);

    let mut out = SweepOutcome::default();
    let mut cached_ts: Option<(f64, SabrTermStructure)> = None;
    for &(level, beta, noise_sd) in levels {
        let ts = if needs_ts {
            match &cached_ts {
                Some((b, ts)) if *b == beta => Some(ts.clone()),
                _ => {
                    let (ts, _) = calibrate_term_structure(
                        &target,
                        &cfg,
                        beta,
                        &CalibrationBounds::default(),
                        &NelderMeadOptions::default(),
                    )?;
                    cached_ts = Some((beta, ts.clone()));
                    Some(ts)
                }
            }
        } else {
            None
        };
        let source = match (&ts, needs_source) {
            (Some(ts), true) => {
                let syn = SynthesisConfig {
                    noise_sd,
                    rng_seed: preset_seed(config.seed, &preset.name),
                    ..SynthesisConfig::default()
                };
                Some(generate_synthetic_dataset(ts, &cfg, &syn)?)
            }
            _ => None,
        };

        for &method in &config.methods {
            let fit = fit_method(method, &target, source.as_ref(), ts.as_ref(), &cfg, config.seed)
                .and_then(|(surface, _)| overall_stats(&surface, &truth));
            match fit {
                Ok((rmse, mae)) => out.rows.push(SweepRow { level, method, rmse, mae }),
                Err(e) => {
                    log::error!(
                        "sweep level {level}, method {method}: {e}"
                    );
                    out.failures.push(CellFailure {
                        preset: preset.name.clone(),
                        method: Some(method),
                        stage: format!("sweep level {level}"),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Synthetic-noise sensitivity on the Base preset: one row per
/// (σ_syn, method) with pooled eval-grid errors. Models that never see the
/// source grid produce identical rows at every level.
pub fn sweep_noise(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let levels: Vec<(f64, f64, f64)> =
        NOISE_LEVELS.iter().map(|&s| (s, config.beta, s)).collect();
    sweep_impl(config, &levels)
}

/// Backbone sensitivity on the Base preset: recalibrates the smile model at
/// each β and refits every method on the resulting source grid.
pub fn sweep_beta(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let levels: Vec<(f64, f64, f64)> =
        BETA_LEVELS.iter().map(|&b| (b, b, config.sigma_syn)).collect();
    sweep_impl(config, &levels)
}

// --- cubic spline baseline ---

/// One maturity slice: natural cubic spline in strike.
#[derive(Debug, Clone)]
struct SplineSlice {
    maturity: f64,
    strikes: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots, zero at both ends.
    curvature: Vec<f64>,
}

impl SplineSlice {
    fn eval(&self, strike: f64) -> f64 {
        let x = &self.strikes;
        let n = x.len();
        // Constant extrapolation: clamp the query into the knot span.
        let k = strike.clamp(x[0], x[n - 1]);
        let i = x.partition_point(|&v| v <= k).clamp(1, n - 1) - 1;
        let h = x[i + 1] - x[i];
        let a = (x[i + 1] - k) / h;
        let b = (k - x[i]) / h;
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.curvature[i] + (b * b * b - b) * self.curvature[i + 1])
                * h
                * h
                / 6.0
    }
}

// Natural-spline second derivatives via the standard tridiagonal system,
// solved by forward elimination and back substitution.
fn natural_curvature(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 1..n - 1 {
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        diag[i] = 2.0 * (h0 + h1);
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    // Eliminate the sub-diagonal h_{i-1}; the ends stay pinned at zero.
    for i in 2..n - 1 {
        let h0 = x[i] - x[i - 1];
        let w = h0 / diag[i - 1];
        diag[i] -= w * h0;
        rhs[i] -= w * rhs[i - 1];
    }
    for i in (1..n - 1).rev() {
        let h1 = x[i + 1] - x[i];
        m[i] = (rhs[i] - h1 * m[i + 1]) / diag[i];
    }
    m
}

/// Cubic-spline interpolant of a quote set: natural cubic per maturity
/// slice in strike, linear across maturities at fixed strike, boundary
/// value outside the data span in both directions.
#[derive(Debug, Clone)]
pub struct SplineSurface {
    slices: Vec<SplineSlice>,
}

impl SplineSurface {
    pub fn eval(&self, strike: f64, tau: f64) -> f64 {
        let s = &self.slices;
        if tau <= s[0].maturity {
            return s[0].eval(strike);
        }
        let last = s.len() - 1;
        if tau >= s[last].maturity {
            return s[last].eval(strike);
        }
        let hi = s.partition_point(|sl| sl.maturity < tau);
        let (a, b) = (&s[hi - 1], &s[hi]);
        if b.maturity == tau {
            return b.eval(strike);
        }
        let w = (tau - a.maturity) / (b.maturity - a.maturity);
        (1.0 - w) * a.eval(strike) + w * b.eval(strike)
    }
}

/// Fits the spline comparator to target quotes. Slices with fewer than four
/// strikes cannot support a cubic and are skipped with a warning.
pub fn fit_spline_baseline(target: &QuoteSet) -> Result<SplineSurface> {
    let mut slices = Vec::new();
    for tau in target.maturities() {
        let quotes = target.slice(tau);
        if quotes.len() < 4 {
            log::warn!(
                "spline baseline: skipping maturity {tau} with {} strikes (need at least 4)",
                quotes.len()
            );
            continue;
        }
        let strikes: Vec<f64> = quotes.iter().map(|q| q.strike).collect();
        let values: Vec<f64> = quotes.iter().map(|q| q.iv).collect();
        let curvature = natural_curvature(&strikes, &values);
        slices.push(SplineSlice { maturity: tau, strikes, values, curvature });
    }
    if slices.is_empty() {
        return Err(IvsError::invalid(
            "spline baseline: no maturity slice has at least 4 strikes",
        ));
    }
    Ok(SplineSurface { slices })
}

// --- emission ---

// File stems derive from preset names: lowercase alphanumerics with
// everything else collapsed to single underscores.
fn sanitize(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_underscore = false;
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            last_underscore = false;
        } else if !last_underscore && !out.is_empty() {
            out.push('_');
            last_underscore = true;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TaskDiagRow {
    preset: String,
    diagnostics: TaskDiagnostics,
}

/// Writes one sweep table with the level column named after the swept
/// quantity (`sigma_syn` or `beta`).
pub fn write_sweep_csv(sweep: &SweepOutcome, level_name: &str, path: &Path) -> Result<()> {
    let mut text = format!("{level_name},method,rmse,mae\n");
    for r in &sweep.rows {
        text.push_str(&format!("{},{},{},{}\n", r.level, r.method, r.rmse, r.mae));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes every artifact of a run under `dir`: `errors.csv`,
/// `arbitrage.csv`, `task_diag.json`, the sweep tables when present,
/// `surfaces/*.csv`, and `failures.csv` when anything failed. Raw CSVs keep
/// full precision; the human-readable scaling lives in
/// [`format_error_table`].
pub fn emit_outputs(
    result: &BenchResult,
    noise_sweep: Option<&SweepOutcome>,
    beta_sweep: Option<&SweepOutcome>,
    dir: &Path,
) -> Result<()> {
    if result.cells.is_empty() && result.failures.is_empty() {
        return Err(IvsError::invalid("nothing to emit: empty benchmark result"));
    }
    std::fs::create_dir_all(dir.join("surfaces"))?;

    let mut errors = String::from("preset,method,maturity,rmse,mae\n");
    for c in &result.cells {
        errors.push_str(&format!(
            "{},{},{},{},{}\n",
            c.preset, c.method, c.maturity, c.rmse, c.mae
        ));
    }
    std::fs::write(dir.join("errors.csv"), errors)?;

    let mut arb = String::from("preset,method,maturity,butterfly_rate,calendar_violations\n");
    for c in &result.cells {
        let calendar = result
            .calendar
            .iter()
            .find(|r| r.preset == c.preset && r.method == c.method)
            .map(|r| r.violations.to_string())
            .unwrap_or_default();
        arb.push_str(&format!(
            "{},{},{},{},{}\n",
            c.preset, c.method, c.maturity, c.butterfly_rate, calendar
        ));
    }
    std::fs::write(dir.join("arbitrage.csv"), arb)?;

    let diag_rows: Vec<TaskDiagRow> = result
        .task_diagnostics
        .iter()
        .map(|(preset, d)| TaskDiagRow { preset: preset.clone(), diagnostics: d.clone() })
        .collect();
    let mut diag_json = serde_json::to_string_pretty(&diag_rows)
        .map_err(|e| IvsError::numerical(e.to_string()))?;
    diag_json.push('\n');
    std::fs::write(dir.join("task_diag.json"), diag_json)?;

    if let Some(sweep) = noise_sweep {
        write_sweep_csv(sweep, "sigma_syn", &dir.join("sweep_noise.csv"))?;
    }
    if let Some(sweep) = beta_sweep {
        write_sweep_csv(sweep, "beta", &dir.join("sweep_beta.csv"))?;
    }

    for grid in &result.surfaces {
        let mut text = String::from("strike,maturity,iv\n");
        for &(k, tau, iv) in &grid.points {
            text.push_str(&format!("{k},{tau},{iv}\n"));
        }
        let file = format!("{}_{}.csv", sanitize(&grid.preset), grid.method);
        std::fs::write(dir.join("surfaces").join(file), text)?;
    }

    let mut all_failures: Vec<&CellFailure> = result.failures.iter().collect();
    if let Some(sweep) = noise_sweep {
        all_failures.extend(sweep.failures.iter());
    }
    if let Some(sweep) = beta_sweep {
        all_failures.extend(sweep.failures.iter());
    }
    if !all_failures.is_empty() {
        let mut writer = csv::Writer::from_path(dir.join("failures.csv"))
            .map_err(|e| IvsError::numerical(e.to_string()))?;
        writer
            .write_record(["preset", "method", "stage", "reason"])
            .map_err(|e| IvsError::numerical(e.to_string()))?;
        for f in all_failures {
            writer
                .write_record([
                    f.preset.as_str(),
                    f.method.map(Method::as_str).unwrap_or("-"),
                    f.stage.as_str(),
                    f.reason.as_str(),
                ])
                .map_err(|e| IvsError::numerical(e.to_string()))?;
        }
        writer.flush()?;
    }
    Ok(())
}

/// Renders the per-maturity accuracy tables with errors scaled by 10³ and
/// rounded to two decimals, one RMSE and one MAE block per eval maturity.
pub fn format_error_table(result: &BenchResult) -> String {
    let mut presets: Vec<&str> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    let mut taus: Vec<f64> = Vec::new();
    for c in &result.cells {
        if !presets.contains(&c.preset.as_str()) {
            presets.push(&c.preset);
        }
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
        if !taus.contains(&c.maturity) {
            taus.push(c.maturity);
        }
    }
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let cell = |preset: &str, method: Method, tau: f64| {
        result
            .cells
            .iter()
            .find(|c| c.preset == preset && c.method == method && c.maturity == tau)
    };
    let mut out = String::new();
    for &tau in &taus {
        for (label, pick) in [
            ("RMSE", Box::new(|c: &BenchCell| c.rmse) as Box<dyn Fn(&BenchCell) -> f64>),
            ("MAE", Box::new(|c: &BenchCell| c.mae)),
        ] {
            out.push_str(&format!("{label} x 10^-3, maturity {tau}\n"));
            out.push_str(&format!("{:<24}", "preset"));
            for m in &methods {
                out.push_str(&format!("{:>9}", m.as_str()));
            }
            out.push('\n');
            for p in &presets {
                out.push_str(&format!("{p:<24}"));
                for &m in &methods {
                    match cell(p, m, tau) {
                        Some(c) => out.push_str(&format!("{:>9.2}", pick(c) * 1e3)),
                        None => out.push_str(&format!("{:>9}", "-")),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
    }
    out
}
