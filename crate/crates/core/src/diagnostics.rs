//! Accuracy metrics and static no-arbitrage checks for fitted vol surfaces.
//!
//! Errors against ground truth are summarized per maturity and pooled:
//!
//!   RMSE = √(Σ (σ̂ᵢ − σᵢ)² / n),   MAE = Σ |σ̂ᵢ − σᵢ| / n,
//!
//! with non-finite pairs dropped and counted rather than poisoning the
//! aggregate. RMSE ≥ MAE always, by the power-mean inequality.
//!
//! The butterfly check converts the surface to call prices on an ordered
//! strike grid and forms second differences over interior points,
//!
//!   Bᵢ(τ) = C(Kᵢ₊₁, τ) − 2 C(Kᵢ, τ) + C(Kᵢ₋₁, τ),
//!
//! counting Bᵢ < −ε as a violation: a butterfly portfolio with negative
//! price. The calendar check samples total variance w(k, τ) = σ²(k, τ)·τ at
//! fixed log-moneyness k, with the strike mapped through the
//! maturity-specific forward K = F_τ·eᵏ, and counts decreases between
//! consecutive maturities; w non-decreasing in τ at fixed k rules out
//! calendar arbitrage.

use serde::{Deserialize, Serialize};

use crate::black_scholes::bs_call_price;
use crate::error::{IvsError, Result};
use crate::market_data::MarketConfig;
use crate::sabr::linspace;

/// Decreases in total variance smaller than this are attributed to floating
/// point noise, not calendar arbitrage.
pub const CALENDAR_TOLERANCE: f64 = 1e-10;

/// RMSE and MAE over one group of prediction points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse: f64,
    pub mae: f64,
    /// Number of valid pairs the statistics were computed over.
    pub count: usize,
}

/// Per-maturity and pooled error statistics for one fitted surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// (maturity, stats) in the caller's maturity order.
    pub per_maturity: Vec<(f64, ErrorStats)>,
    /// Statistics pooled over every valid pair in every group.
    pub overall: ErrorStats,
    /// Non-finite pairs excluded across all groups.
    pub dropped: usize,
}

/// RMSE and MAE of `predicted` against `truth`, skipping pairs where either
/// side is non-finite. Returns the statistics and the number of pairs
/// dropped that way.
pub fn rmse_mae(predicted: &[f64], truth: &[f64]) -> Result<(ErrorStats, usize)> {
    if predicted.len() != truth.len() {
        return Err(IvsError::invalid(format!(
            "prediction and truth lengths differ: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sum_sq = 0.0;
    let mut sum_abs = 0.0;
    let mut count = 0usize;
    for (&p, &t) in predicted.iter().zip(truth) {
        if !p.is_finite() || !t.is_finite() {
            continue;
        }
        let e = p - t;
        sum_sq += e * e;
        sum_abs += e.abs();
        count += 1;
    }
    if count == 0 {
        return Err(IvsError::invalid(
            "no valid prediction pairs left after dropping non-finite entries",
        ));
    }
    let n = count as f64;
    let stats = ErrorStats { rmse: (sum_sq / n).sqrt(), mae: sum_abs / n, count };
    Ok((stats, predicted.len() - count))
}

/// Builds the per-maturity report and the pooled overall statistics from
/// `(maturity, predicted, truth)` groups. The overall row pools raw errors
/// across groups rather than averaging the per-group statistics, so groups
/// of different sizes carry their actual weight.
pub fn error_report(groups: &[(f64, &[f64], &[f64])]) -> Result<ErrorReport> {
    if groups.is_empty() {
        return Err(IvsError::invalid("error report needs at least one maturity group"));
    }
    let mut per_maturity = Vec::with_capacity(groups.len());
    let mut dropped = 0usize;
    let mut all_pred = Vec::new();
    let mut all_truth = Vec::new();
    for &(tau, pred, truth) in groups {
        let (stats, d) = rmse_mae(pred, truth)?;
        per_maturity.push((tau, stats));
        dropped += d;
        all_pred.extend_from_slice(pred);
        all_truth.extend_from_slice(truth);
    }
    let (overall, _) = rmse_mae(&all_pred, &all_truth)?;
    Ok(ErrorReport { per_maturity, overall, dropped })
}

/// Strike grid and tolerance for the butterfly check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ButterflyOptions {
    pub n_strikes: usize,
    pub strike_range: (f64, f64),
    /// Violation threshold ε in price units.
    pub tolerance: f64,
}

impl Default for ButterflyOptions {
    fn default() -> Self {
        ButterflyOptions { n_strikes: 100, strike_range: (80.0, 140.0), tolerance: 2e-5 }
    }
}

impl ButterflyOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_strikes < 3 {
            return Err(IvsError::invalid(format!(
                "butterfly check needs at least 3 strikes, got {}",
                self.n_strikes
            )));
        }
        if !(self.strike_range.0 > 0.0 && self.strike_range.1 > self.strike_range.0) {
            return Err(IvsError::invalid(format!(
                "strike range must satisfy 0 < lo < hi, got ({}, {})",
                self.strike_range.0, self.strike_range.1
            )));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(IvsError::invalid(format!(
                "butterfly tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Outcome of one butterfly scan at a single maturity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ButterflyOutcome {
    /// Violations divided by evaluable interior points, in [0, 1].
    pub rate: f64,
    pub violations: usize,
    /// Interior points whose full (Kᵢ₋₁, Kᵢ, Kᵢ₊₁) triple was evaluable.
    pub interior: usize,
    /// Grid points excluded because the surface returned a non-finite vol.
    pub excluded: usize,
}

/// Scans second differences of call prices in strike at maturity `tau`.
/// `surface` maps (strike, maturity) to implied vol; grid points where it
/// returns a non-finite value are excluded (and counted), taking their
/// adjacent second differences out of the denominator.
pub fn butterfly_check<F>(
    surface: F,
    cfg: &MarketConfig,
    tau: f64,
    opts: &ButterflyOptions,
) -> Result<ButterflyOutcome>
where
    F: Fn(f64, f64) -> f64,
{
    opts.validate()?;
    cfg.validate()?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(IvsError::invalid(format!("maturity must be positive, got {tau}")));
    }

    let strikes = linspace(opts.strike_range.0, opts.strike_range.1, opts.n_strikes);
    let mut prices: Vec<Option<f64>> = Vec::with_capacity(strikes.len());
    let mut excluded = 0usize;
    for &k in &strikes {
        let vol = surface(k, tau);
        if !vol.is_finite() || vol <= 0.0 {
            log::warn!("butterfly check: surface returned unusable vol {vol} at strike {k}, maturity {tau}");
            excluded += 1;
            prices.push(None);
            continue;
        }
        prices.push(Some(bs_call_price(cfg, k, tau, vol)?));
    }

    let mut violations = 0usize;
    let mut interior = 0usize;
    for i in 1..strikes.len() - 1 {
        let (Some(lo), Some(mid), Some(hi)) = (prices[i - 1], prices[i], prices[i + 1]) else {
            continue;
        };
        interior += 1;
        if hi - 2.0 * mid + lo < -opts.tolerance {
            violations += 1;
        }
    }
    if interior == 0 {
        return Err(IvsError::numerical(
            "butterfly check: no evaluable interior strike triples",
        ));
    }
    Ok(ButterflyOutcome {
        rate: violations as f64 / interior as f64,
        violations,
        interior,
        excluded,
    })
}

/// Total variance samples w(k, τ) at one log-moneyness level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalVarianceCurve {
    pub log_moneyness: f64,
    /// (maturity, w) pairs in increasing maturity order.
    pub samples: Vec<(f64, f64)>,
}

/// Calendar monotonicity result: the sampled curves plus the count of
/// decreases in τ at fixed k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarOutcome {
    pub curves: Vec<TotalVarianceCurve>,
    pub violations: usize,
}

/// Samples w(k, τ) = σ²·τ on the product grid and counts strict decreases
/// between consecutive maturities at fixed log-moneyness, beyond
/// [`CALENDAR_TOLERANCE`]. The strike handed to the surface is K = F_τ·eᵏ
/// with the forward of each maturity, not a fixed spot multiple, so one k
/// tracks the same forward-moneyness line across the term structure.
pub fn total_variance_check<F>(
    surface: F,
    cfg: &MarketConfig,
    k_grid: &[f64],
    tau_grid: &[f64],
) -> Result<CalendarOutcome>
where
    F: Fn(f64, f64) -> f64,
{
    cfg.validate()?;
    if k_grid.is_empty() || tau_grid.len() < 2 {
        return Err(IvsError::invalid(
            "calendar check needs at least one log-moneyness and two maturities",
        ));
    }
    for w in tau_grid.windows(2) {
        if !(w[0] > 0.0 && w[1] > w[0]) {
            return Err(IvsError::invalid(format!(
                "maturity grid must be positive and strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }

    let mut curves = Vec::with_capacity(k_grid.len());
    let mut violations = 0usize;
    for &k in k_grid {
        let mut samples = Vec::with_capacity(tau_grid.len());
        for &tau in tau_grid {
            let strike = cfg.forward(tau) * k.exp();
            let vol = surface(strike, tau);
            if !vol.is_finite() {
                return Err(IvsError::numerical(format!(
                    "calendar check: surface returned non-finite vol at k {k}, maturity {tau}"
                )));
            }
            samples.push((tau, vol * vol * tau));
        }
        for w in samples.windows(2) {
            if w[1].1 < w[0].1 - CALENDAR_TOLERANCE {
                violations += 1;
            }
        }
        curves.push(TotalVarianceCurve { log_moneyness: k, samples });
    }
    Ok(CalendarOutcome { curves, violations })
}

/// Combined no-arbitrage summary for one fitted surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbReport {
    /// Butterfly tolerance ε the rates were computed with.
    pub tolerance: f64,
    /// (maturity, butterfly violation rate) per checked maturity.
    pub butterfly_rates: Vec<(f64, f64)>,
    pub total_variance_curves: Vec<TotalVarianceCurve>,
    pub calendar_violations: usize,
}

/// Runs the butterfly check at each maturity in `taus` and the calendar
/// check on `(k_grid, tau_grid)`, assembling one report.
pub fn arbitrage_report<F>(
    surface: F,
    cfg: &MarketConfig,
    taus: &[f64],
    k_grid: &[f64],
    tau_grid: &[f64],
    opts: &ButterflyOptions,
) -> Result<ArbReport>
where
    F: Fn(f64, f64) -> f64,
{
    let mut butterfly_rates = Vec::with_capacity(taus.len());
    for &tau in taus {
        let out = butterfly_check(&surface, cfg, tau, opts)?;
        butterfly_rates.push((tau, out.rate));
    }
    let calendar = total_variance_check(&surface, cfg, k_grid, tau_grid)?;
    Ok(ArbReport {
        tolerance: opts.tolerance,
        butterfly_rates,
        total_variance_curves: calendar.curves,
        calendar_violations: calendar.violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::black_scholes::{implied_vol, IvSolverConfig};
    use approx::assert_abs_diff_eq;

    // --- rmse / mae ---

    #[test]
    fn perfect_fit_is_zero() {
        let v = vec![0.2, 0.21, 0.19, 0.25];
        let (stats, dropped) = rmse_mae(&v, &v).unwrap();
        assert_eq!(stats.rmse, 0.0);
        assert_eq!(stats.mae, 0.0);
        assert_eq!(stats.count, 4);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn constant_offset_gives_equal_rmse_and_mae() {
        let truth = vec![0.2, 0.3, 0.4, 0.5, 0.6];
        let pred: Vec<f64> = truth.iter().map(|t| t + 0.01).collect();
        let (stats, _) = rmse_mae(&pred, &truth).unwrap();
        assert_abs_diff_eq!(stats.rmse, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.mae, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn two_point_hand_arithmetic() {
        // Errors 0.001 and -0.003: MAE = 0.002, RMSE = sqrt(5e-6).
        let truth = vec![0.2, 0.2];
        let pred = vec![0.201, 0.197];
        let (stats, _) = rmse_mae(&pred, &truth).unwrap();
        assert_abs_diff_eq!(stats.mae, 0.002, epsilon = 1e-16);
        assert_abs_diff_eq!(stats.rmse, 0.0022360679774997896, epsilon = 1e-16);
    }

    #[test]
    fn non_finite_pairs_dropped_and_counted() {
        let truth = vec![0.2, f64::INFINITY, 0.2, 0.2];
        let pred = vec![0.21, 0.2, f64::NAN, 0.19];
        let (stats, dropped) = rmse_mae(&pred, &truth).unwrap();
        assert_eq!(stats.count, 2);
        assert_eq!(dropped, 2);
        assert_abs_diff_eq!(stats.mae, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn length_mismatch_and_empty_rejected() {
        assert!(rmse_mae(&[0.2], &[0.2, 0.3]).is_err());
        assert!(rmse_mae(&[], &[]).is_err());
        assert!(rmse_mae(&[f64::NAN], &[0.2]).is_err());
    }

    #[test]
    fn rmse_at_least_mae() {
        // Power-mean inequality on a spread of error patterns.
        let cases: Vec<Vec<f64>> = vec![
            vec![0.001, -0.003, 0.0, 0.01],
            vec![0.5],
            vec![-0.1, -0.1, -0.1],
            vec![1e-8, 2e-3, -4e-5, 7e-2, -0.3],
        ];
        for errs in cases {
            let truth = vec![0.2; errs.len()];
            let pred: Vec<f64> = errs.iter().map(|e| 0.2 + e).collect();
            let (stats, _) = rmse_mae(&pred, &truth).unwrap();
            // Equality holds when all |e| agree, so leave round-off room.
            assert!(
                stats.rmse >= stats.mae * (1.0 - 1e-14),
                "{} < {}",
                stats.rmse,
                stats.mae
            );
        }
    }

    #[test]
    fn report_pools_raw_errors_not_group_means() {
        let t1 = vec![0.2, 0.2];
        let p1 = vec![0.21, 0.21];
        let t2 = vec![0.3];
        let p2 = vec![0.33];
        let report = error_report(&[
            (0.3, p1.as_slice(), t1.as_slice()),
            (0.9, p2.as_slice(), t2.as_slice()),
        ])
        .unwrap();
        assert_eq!(report.per_maturity.len(), 2);
        assert_eq!(report.overall.count, 3);
        // Pooled MAE is (0.01 + 0.01 + 0.03)/3, not the mean of 0.01 and 0.03.
        assert_abs_diff_eq!(report.overall.mae, 0.05 / 3.0, epsilon = 1e-15);
        let pooled_rmse = ((2.0 * 1e-4 + 9e-4) / 3.0_f64).sqrt();
        assert_abs_diff_eq!(report.overall.rmse, pooled_rmse, epsilon = 1e-15);
        assert_eq!(report.dropped, 0);
    }

    #[test]
    fn report_accumulates_dropped_across_groups() {
        let t1 = vec![0.2, f64::NAN, 0.2];
        let p1 = vec![0.21, 0.2, 0.19];
        let t2 = vec![0.3, 0.3];
        let p2 = vec![f64::NAN, 0.31];
        let report = error_report(&[
            (0.3, p1.as_slice(), t1.as_slice()),
            (2.2, p2.as_slice(), t2.as_slice()),
        ])
        .unwrap();
        assert_eq!(report.dropped, 2);
        assert_eq!(report.overall.count, 3);
    }

    // --- butterfly check ---

    fn default_cfg() -> MarketConfig {
        MarketConfig::default()
    }

    #[test]
    fn affine_prices_have_zero_rate() {
        // Prices linear in strike have identically zero second differences.
        // The surface is the implied vol of C(K) = df·(0.75·F − K/2), which
        // stays inside the no-arbitrage band on [80, 140]; inverting and
        // re-pricing round-trips through bs_call_price, so the tolerance
        // absorbs only solver noise.
        let cfg = default_cfg();
        let tau = 0.5;
        let df = (-cfg.r * tau).exp();
        let fwd = cfg.forward(tau);
        let solver = IvSolverConfig { tolerance: 1e-12, ..Default::default() };
        let out = butterfly_check(
            |k, t| {
                let price = df * (0.75 * fwd - 0.5 * k);
                implied_vol(&cfg, k, t, price, &solver).unwrap()
            },
            &cfg,
            tau,
            &ButterflyOptions::default(),
        )
        .unwrap();
        assert_eq!(out.rate, 0.0);
        assert_eq!(out.interior, 98);
        assert_eq!(out.excluded, 0);
    }

    #[test]
    fn flat_vol_surface_is_convex() {
        let cfg = default_cfg();
        for tau in [0.3, 0.9, 2.2] {
            let out =
                butterfly_check(|_, _| 0.25, &cfg, tau, &ButterflyOptions::default()).unwrap();
            assert_eq!(out.violations, 0);
            assert_eq!(out.rate, 0.0);
        }
    }

    #[test]
    fn local_vol_spike_breaks_convexity() {
        let cfg = default_cfg();
        // 100 points on [80, 140] put a grid node at 80 + 48·60/99 ≈ 109.09;
        // lifting the vol there alone pushes that call price above the chord
        // of its neighbors.
        let spike_at = 80.0 + 48.0 * 60.0 / 99.0;
        let out = butterfly_check(
            |k, _| if (k - spike_at).abs() < 0.25 { 0.30 } else { 0.20 },
            &cfg,
            0.5,
            &ButterflyOptions::default(),
        )
        .unwrap();
        assert!(out.violations > 0);
        assert!(out.rate > 0.0 && out.rate <= 1.0);
    }

    #[test]
    fn non_finite_vol_excluded_and_counted() {
        let cfg = default_cfg();
        let bad_at = 80.0 + 10.0 * 60.0 / 99.0;
        let out = butterfly_check(
            |k, _| if (k - bad_at).abs() < 0.25 { f64::NAN } else { 0.2 },
            &cfg,
            0.5,
            &ButterflyOptions::default(),
        )
        .unwrap();
        assert_eq!(out.excluded, 1);
        // One dead grid point removes the three triples that touch it.
        assert_eq!(out.interior, 95);
        assert_eq!(out.violations, 0);
    }

    #[test]
    fn butterfly_rejects_bad_options() {
        let cfg = default_cfg();
        let mut opts = ButterflyOptions { n_strikes: 2, ..Default::default() };
        assert!(butterfly_check(|_, _| 0.2, &cfg, 0.5, &opts).is_err());
        opts = ButterflyOptions { tolerance: 0.0, ..Default::default() };
        assert!(butterfly_check(|_, _| 0.2, &cfg, 0.5, &opts).is_err());
        opts = ButterflyOptions { strike_range: (140.0, 80.0), ..Default::default() };
        assert!(butterfly_check(|_, _| 0.2, &cfg, 0.5, &opts).is_err());
        assert!(butterfly_check(|_, _| 0.2, &cfg, -0.5, &ButterflyOptions::default()).is_err());
    }

    #[test]
    fn all_points_dead_is_an_error() {
        let cfg = default_cfg();
        assert!(butterfly_check(|_, _| f64::NAN, &cfg, 0.5, &ButterflyOptions::default())
            .is_err());
    }

    // --- calendar check ---

    #[test]
    fn flat_vol_has_no_calendar_violations() {
        let cfg = default_cfg();
        let out = total_variance_check(
            |_, _| 0.25,
            &cfg,
            &[-0.2, 0.0, 0.2],
            &[0.3, 0.9, 2.2],
        )
        .unwrap();
        assert_eq!(out.violations, 0);
        assert_eq!(out.curves.len(), 3);
        // w = sigma^2 tau grows linearly for flat vol.
        let w: Vec<f64> = out.curves[1].samples.iter().map(|&(_, w)| w).collect();
        assert_abs_diff_eq!(w[0], 0.0625 * 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], 0.0625 * 2.2, epsilon = 1e-15);
    }

    #[test]
    fn inverse_sqrt_tau_vol_sits_on_the_boundary() {
        // sigma = c/sqrt(tau) makes w = c^2 at every maturity; constant w is
        // non-decreasing, so the tolerance must not flag it.
        let cfg = default_cfg();
        let out = total_variance_check(
            |_, tau: f64| 0.2 / tau.sqrt(),
            &cfg,
            &[-0.1, 0.0, 0.15],
            &[0.25, 0.5, 1.0, 2.0],
        )
        .unwrap();
        assert_eq!(out.violations, 0);
    }

    #[test]
    fn constructed_decrease_is_flagged() {
        // sigma(0.5) = 0.30 gives w = 0.045; sigma(1.0) = 0.20 gives 0.040.
        let cfg = default_cfg();
        let out = total_variance_check(
            |_, tau| if tau < 0.75 { 0.30 } else { 0.20 },
            &cfg,
            &[0.0, 0.1],
            &[0.5, 1.0],
        )
        .unwrap();
        assert_eq!(out.violations, 2);
    }

    #[test]
    fn strikes_follow_the_maturity_specific_forward() {
        use std::cell::RefCell;
        let cfg = MarketConfig { r: 0.04, q: 0.01, ..MarketConfig::default() };
        let seen: RefCell<Vec<(f64, f64)>> = RefCell::new(Vec::new());
        let k = 0.1;
        total_variance_check(
            |strike, tau| {
                seen.borrow_mut().push((strike, tau));
                0.25
            },
            &cfg,
            &[k],
            &[0.5, 1.5],
        )
        .unwrap();
        for (strike, tau) in seen.into_inner() {
            assert_abs_diff_eq!(strike, cfg.forward(tau) * k.exp(), epsilon = 1e-12);
            // Distinct from the spot mapping because r != q.
            assert!((strike - cfg.s0 * k.exp()).abs() > 1e-3);
        }
    }

    #[test]
    fn calendar_rejects_bad_grids() {
        let cfg = default_cfg();
        assert!(total_variance_check(|_, _| 0.2, &cfg, &[], &[0.5, 1.0]).is_err());
        assert!(total_variance_check(|_, _| 0.2, &cfg, &[0.0], &[0.5]).is_err());
        assert!(total_variance_check(|_, _| 0.2, &cfg, &[0.0], &[1.0, 0.5]).is_err());
        assert!(total_variance_check(|_, _| f64::NAN, &cfg, &[0.0], &[0.5, 1.0]).is_err());
    }

    // --- combined report ---

    #[test]
    fn report_serializes_round_trip() {
        let cfg = default_cfg();
        let report = arbitrage_report(
            |_, _| 0.22,
            &cfg,
            &[0.3, 2.2],
            &[-0.2, 0.0, 0.2],
            &[0.3, 0.9, 2.2],
            &ButterflyOptions::default(),
        )
        .unwrap();
        assert_eq!(report.butterfly_rates.len(), 2);
        assert!(report.butterfly_rates.iter().all(|&(_, r)| r == 0.0));
        assert_eq!(report.calendar_violations, 0);
        let json = serde_json::to_string(&report).unwrap();
        let back: ArbReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
