//! SABR smile model: Hagan's expansion, slice calibration and the dense
//! synthetic dataset built from the calibrated parameter term structure.
//!
//! The implied vol approximation for forward F, strike K and expiry τ is
//!
//!   σ(K, F, τ) = I⁰ · [1 + I¹ τ],
//!   I⁰ = α/((FK)^((1−β)/2) D(ln(F/K))) · z/χ(z),
//!   I¹ = (1−β)²α²/(24 (FK)^(1−β)) + ρβνα/(4 (FK)^((1−β)/2)) + (2−3ρ²)ν²/24,
//!   z  = (ν/α) (FK)^((1−β)/2) ln(F/K),
//!   χ(z) = ln[(√(1−2ρz+z²) + z − ρ)/(1−ρ)],
//!
//! with D the fourth-order log-moneyness polynomial. A Taylor guard replaces
//! z/χ(z) near z = 0 where the quotient is 0/0, which also covers K = F, so
//! a single code path serves both branches and the at-the-money value is the
//! smooth limit of the wings.
//!
//! Calibration fits (α, ρ, ν) per maturity slice with β fixed, minimizing
//! squared vol errors by Nelder-Mead in logit-transformed coordinates so the
//! simplex can never leave the parameter box.
//!
//! Term-structure calibration and evaluation divide strikes and forwards by
//! spot before entering the expansion. The formula is invariant under that
//! rescaling up to the α convention (α ↦ α·c^(β−1) when prices scale by c),
//! and the normalized convention keeps α on the volatility scale for every
//! backbone exponent, so one α box covers β from 0 to 1. `calibrate_slice`
//! itself is scale-agnostic and fits whatever units the caller supplies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validate_finite, validate_positive, IvsError, Result};
use crate::market_data::{MarketConfig, OptionQuote, QuoteSet, Task};
use crate::optim::{nelder_mead, IntervalTransform, NelderMeadOptions};

/// SABR parameters attached to one maturity slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SabrSliceParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub nu: f64,
    pub maturity: f64,
}

impl SabrSliceParams {
    pub fn validate(&self) -> Result<()> {
        validate_positive(self.alpha, "alpha")?;
        validate_positive(self.maturity, "maturity")?;
        validate_finite(self.nu, "nu")?;
        if self.nu < 0.0 {
            return Err(IvsError::invalid(format!("nu must be non-negative, got {}", self.nu)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(IvsError::invalid(format!("rho must be in (-1, 1), got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(IvsError::invalid(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

// Below this |z| the direct z/chi(z) quotient loses digits to cancellation
// and the third-order Taylor expansion is more accurate.
const Z_GUARD: f64 = 1e-6;

/// Hagan expansion implied vol. Callers guarantee `strike`, `forward` and
/// `tau` positive and `p` valid per [`SabrSliceParams::validate`].
pub fn hagan_iv(p: &SabrSliceParams, strike: f64, forward: f64, tau: f64) -> f64 {
    debug_assert!(strike > 0.0 && forward > 0.0 && tau > 0.0);
    let one_m_beta = 1.0 - p.beta;
    let log_fk = (forward / strike).ln();
    let fk_half = (forward * strike).powf(0.5 * one_m_beta);
    let z = (p.nu / p.alpha) * fk_half * log_fk;
    let z_over_chi = if z.abs() < Z_GUARD {
        1.0 - 0.5 * p.rho * z + (2.0 - 3.0 * p.rho * p.rho) * z * z / 12.0
    } else {
        let chi =
            (((1.0 - 2.0 * p.rho * z + z * z).sqrt() + z - p.rho) / (1.0 - p.rho)).ln();
        z / chi
    };
    let l2 = log_fk * log_fk;
    let denom = 1.0 + one_m_beta.powi(2) / 24.0 * l2 + one_m_beta.powi(4) / 1920.0 * l2 * l2;
    let i0 = p.alpha / (fk_half * denom) * z_over_chi;
    let i1 = one_m_beta.powi(2) * p.alpha * p.alpha / (24.0 * fk_half * fk_half)
        + 0.25 * p.rho * p.beta * p.nu * p.alpha / fk_half
        + (2.0 - 3.0 * p.rho * p.rho) / 24.0 * p.nu * p.nu;
    i0 * (1.0 + i1 * tau)
}

/// Open parameter boxes for slice calibration. The default α box assumes
/// the spot-normalized strike convention used by the term-structure layer,
/// where α sits on the volatility scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationBounds {
    pub alpha: (f64, f64),
    pub rho: (f64, f64),
    pub nu: (f64, f64),
}

impl Default for CalibrationBounds {
    fn default() -> Self {
        CalibrationBounds { alpha: (0.01, 2.0), rho: (-0.99, 0.0), nu: (0.05, 1.5) }
    }
}

impl CalibrationBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in
            [("alpha", self.alpha), ("rho", self.rho), ("nu", self.nu)]
        {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(IvsError::invalid(format!("{name} bounds ({lo}, {hi}) invalid")));
            }
        }
        Ok(())
    }
}

/// Outcome of one slice calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceFit {
    pub params: SabrSliceParams,
    /// Sum of squared vol errors at the fitted parameters.
    pub objective: f64,
    /// Same objective at the heuristic starting point.
    pub initial_objective: f64,
    /// False when the optimizer hit its iteration budget; params are then
    /// best-so-far.
    pub converged: bool,
}

// Pulls a start value strictly inside the box so the logit transform is
// defined.
fn interior(bounds: (f64, f64), x: f64) -> f64 {
    let width = bounds.1 - bounds.0;
    x.clamp(bounds.0 + 0.02 * width, bounds.1 - 0.02 * width)
}

/// Calibrates (α, ρ, ν) of one maturity slice to quoted vols with β held
/// fixed. Needs at least three quotes; all quotes must share one maturity.
pub fn calibrate_slice(
    smile: &[OptionQuote],
    forward: f64,
    beta: f64,
    bounds: &CalibrationBounds,
    opts: &NelderMeadOptions,
) -> Result<SliceFit> {
    if smile.len() < 3 {
        return Err(IvsError::invalid(format!(
            "slice calibration needs at least 3 quotes, got {}",
            smile.len()
        )));
    }
    validate_positive(forward, "forward")?;
    bounds.validate()?;
    let tau = smile[0].maturity;
    for q in smile {
        q.validate()?;
        if q.maturity != tau {
            return Err(IvsError::invalid(format!(
                "slice mixes maturities {tau} and {}",
                q.maturity
            )));
        }
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(IvsError::invalid(format!("beta must be in [0, 1], got {beta}")));
    }

    let t_alpha = IntervalTransform::new(bounds.alpha.0, bounds.alpha.1)?;
    let t_rho = IntervalTransform::new(bounds.rho.0, bounds.rho.1)?;
    let t_nu = IntervalTransform::new(bounds.nu.0, bounds.nu.1)?;

    let params_at = |t: &[f64]| SabrSliceParams {
        alpha: t_alpha.to_bounded(t[0]),
        beta,
        rho: t_rho.to_bounded(t[1]),
        nu: t_nu.to_bounded(t[2]),
        maturity: tau,
    };
    let objective = |t: &[f64]| {
        let p = params_at(t);
        smile
            .iter()
            .map(|q| {
                let e = hagan_iv(&p, q.strike, forward, tau) - q.iv;
                e * e
            })
            .sum::<f64>()
    };

    // ATM-anchored level start: the backbone gives iv(F) ~ alpha / F^(1-beta).
    let atm = smile
        .iter()
        .min_by(|a, b| {
            (a.strike - forward).abs().partial_cmp(&(b.strike - forward).abs()).unwrap()
        })
        .unwrap();
    let alpha0 = interior(bounds.alpha, atm.iv * forward.powf(1.0 - beta));
    let start = [
        t_alpha.to_unbounded(alpha0),
        t_rho.to_unbounded(interior(bounds.rho, -0.5)),
        t_nu.to_unbounded(interior(bounds.nu, 0.5)),
    ];
    let initial_objective = objective(&start);

    let mut best = nelder_mead(&mut { objective }, &start, opts);
    // One perturbed restart when the fit is visibly poor in mean square.
    if best.f_min / smile.len() as f64 > 1e-4 {
        let restart = [
            t_alpha.to_unbounded(interior(bounds.alpha, 1.25 * alpha0)),
            t_rho.to_unbounded(interior(bounds.rho, -0.25)),
            t_nu.to_unbounded(interior(bounds.nu, 0.8)),
        ];
        let second = nelder_mead(&mut { objective }, &restart, opts);
        if second.f_min < best.f_min {
            best = second;
        }
    }
    if !best.converged {
        log::warn!(
            "slice calibration at tau {tau} stopped without convergence: {}",
            best.message
        );
    }
    Ok(SliceFit {
        params: params_at(&best.x_min),
        objective: best.f_min,
        initial_objective,
        converged: best.converged,
    })
}

/// Per-maturity SABR parameters with one shared β, sorted by maturity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SabrTermStructure {
    beta: f64,
    slices: Vec<SabrSliceParams>,
}

impl SabrTermStructure {
    pub fn new(beta: f64, slices: Vec<SabrSliceParams>) -> Result<Self> {
        if slices.is_empty() {
            return Err(IvsError::invalid("term structure needs at least one slice"));
        }
        for s in &slices {
            s.validate()?;
            if s.beta != beta {
                return Err(IvsError::invalid(format!(
                    "slice beta {} differs from shared beta {beta}",
                    s.beta
                )));
            }
        }
        for w in slices.windows(2) {
            if !(w[0].maturity < w[1].maturity) {
                return Err(IvsError::invalid(format!(
                    "slice maturities must increase strictly, got {} then {}",
                    w[0].maturity, w[1].maturity
                )));
            }
        }
        Ok(SabrTermStructure { beta, slices })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn slices(&self) -> &[SabrSliceParams] {
        &self.slices
    }

    /// Writes `tau,alpha,beta,rho,nu` rows for downstream plotting.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("tau,alpha,beta,rho,nu\n");
        for s in &self.slices {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.maturity, s.alpha, s.beta, s.rho, s.nu
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Calibrates every maturity slice of `quotes` in parallel and assembles the
/// term structure. Strikes and forwards are divided by spot before the fit,
/// so the stored α follows the normalized convention that [`surface_iv`]
/// expects.
pub fn calibrate_term_structure(
    quotes: &QuoteSet,
    cfg: &MarketConfig,
    beta: f64,
    bounds: &CalibrationBounds,
    opts: &NelderMeadOptions,
) -> Result<(SabrTermStructure, Vec<SliceFit>)> {
    cfg.validate()?;
    let taus = quotes.maturities();
    let fits = taus
        .par_iter()
        .map(|&tau| {
            let slice: Vec<OptionQuote> = quotes
                .slice(tau)
                .iter()
                .map(|q| OptionQuote { strike: q.strike / cfg.s0, ..*q })
                .collect();
            calibrate_slice(&slice, cfg.forward(tau) / cfg.s0, beta, bounds, opts)
        })
        .collect::<Result<Vec<SliceFit>>>()?;
    let ts = SabrTermStructure::new(beta, fits.iter().map(|f| f.params).collect())?;
    Ok((ts, fits))
}

/// Parameters at an arbitrary maturity: exact at calibrated slices, linear
/// between neighbors, nearest slice held flat outside the calibrated span.
pub fn interp_params(ts: &SabrTermStructure, tau: f64) -> SabrSliceParams {
    let s = ts.slices();
    let first = &s[0];
    let last = &s[s.len() - 1];
    if tau <= first.maturity {
        return SabrSliceParams { maturity: tau, ..*first };
    }
    if tau >= last.maturity {
        return SabrSliceParams { maturity: tau, ..*last };
    }
    let hi = s.partition_point(|p| p.maturity < tau);
    let (a, b) = (&s[hi - 1], &s[hi]);
    if b.maturity == tau {
        return SabrSliceParams { maturity: tau, ..*b };
    }
    let w = (tau - a.maturity) / (b.maturity - a.maturity);
    SabrSliceParams {
        alpha: (1.0 - w) * a.alpha + w * b.alpha,
        beta: ts.beta,
        rho: (1.0 - w) * a.rho + w * b.rho,
        nu: (1.0 - w) * a.nu + w * b.nu,
        maturity: tau,
    }
}

/// Implied vol of the calibrated surface at an absolute strike. Interpolates
/// the slice parameters to `tau` and evaluates the expansion on the
/// spot-normalized strike and forward, matching the calibration convention.
pub fn surface_iv(ts: &SabrTermStructure, cfg: &MarketConfig, strike: f64, tau: f64) -> f64 {
    let p = interp_params(ts, tau);
    hagan_iv(&p, strike / cfg.s0, cfg.forward(tau) / cfg.s0, tau)
}

/// Controls for the dense synthetic source grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub grid_n_strikes: usize,
    pub grid_n_maturities: usize,
    pub strike_range: (f64, f64),
    pub maturity_range: (f64, f64),
    /// Standard deviation of the vol noise added to each grid point.
    pub noise_sd: f64,
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            grid_n_strikes: 35,
            grid_n_maturities: 35,
            strike_range: (70.0, 160.0),
            maturity_range: (0.08, 3.0),
            noise_sd: 0.01,
            rng_seed: 42,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n_strikes < 2 || self.grid_n_maturities < 2 {
            return Err(IvsError::invalid("synthetic grid needs at least 2 points per axis"));
        }
        for (name, (lo, hi)) in
            [("strike_range", self.strike_range), ("maturity_range", self.maturity_range)]
        {
            if !(0.0 < lo && lo < hi) || !hi.is_finite() {
                return Err(IvsError::invalid(format!("{name} ({lo}, {hi}) invalid")));
            }
        }
        validate_finite(self.noise_sd, "noise_sd")?;
        if self.noise_sd < 0.0 {
            return Err(IvsError::invalid("noise_sd must be non-negative"));
        }
        Ok(())
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evaluates the interpolated term structure on the dense grid and perturbs
/// each vol with seeded Gaussian noise, clamped below at 1e-4 so no quote
/// degenerates to a nonpositive vol. Iteration is maturity-major and
/// single-threaded so a seed fixes the dataset bit for bit.
pub fn generate_synthetic_dataset(
    ts: &SabrTermStructure,
    cfg: &MarketConfig,
    syn: &SynthesisConfig,
) -> Result<QuoteSet> {
    use rand::SeedableRng;
    syn.validate()?;
    cfg.validate()?;
    let strikes = linspace(syn.strike_range.0, syn.strike_range.1, syn.grid_n_strikes);
    let taus = linspace(syn.maturity_range.0, syn.maturity_range.1, syn.grid_n_maturities);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(syn.rng_seed);
    let noise = if syn.noise_sd > 0.0 {
        Some(rand_distr::Normal::new(0.0, syn.noise_sd).map_err(|e| IvsError::numerical(e.to_string()))?)
    } else {
        None
    };

    let mut quotes = Vec::with_capacity(strikes.len() * taus.len());
    for &tau in &taus {
        for &k in &strikes {
            let mut iv = surface_iv(ts, cfg, k, tau);
            if let Some(n) = &noise {
                use rand_distr::Distribution;
                iv += n.sample(&mut rng);
            }
            quotes.push(OptionQuote { strike: k, maturity: tau, iv: iv.max(1e-4) });
        }
    }
    QuoteSet::new(Task::Source, quotes)
}
