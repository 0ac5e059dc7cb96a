//! Black-Scholes call pricing and implied volatility.
//!
//! With forward F = S0 e^{(r−q)τ} the undiscounted call is written on the
//! forward,
//!
//!   C = e^{−rτ} [F Φ(d1) − K Φ(d2)],
//!   d1 = ln(F/K)/(σ√τ) + σ√τ/2,   d2 = d1 − σ√τ,
//!
//! and the implied volatility of a price is the unique σ with C(σ) = price,
//! found here by a Newton iteration safeguarded with a bisection bracket.

use serde::{Deserialize, Serialize};

use crate::error::{validate_finite, validate_positive, IvsError, Result};
use crate::market_data::MarketConfig;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal CDF. Evaluated through erfc so both tails keep full
/// relative accuracy instead of cancelling against 1.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn validate_contract(cfg: &MarketConfig, strike: f64, maturity: f64) -> Result<()> {
    cfg.validate()?;
    validate_positive(strike, "strike")?;
    validate_positive(maturity, "maturity")
}

/// Discounted Black-Scholes call value. `sigma = 0` returns the discounted
/// intrinsic value on the forward.
pub fn bs_call_price(cfg: &MarketConfig, strike: f64, maturity: f64, sigma: f64) -> Result<f64> {
    validate_contract(cfg, strike, maturity)?;
    validate_finite(sigma, "sigma")?;
    if sigma < 0.0 {
        return Err(IvsError::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    let disc = (-cfg.r * maturity).exp();
    let fwd = cfg.forward(maturity);
    if sigma == 0.0 {
        return Ok(disc * (fwd - strike).max(0.0));
    }
    let vol_t = sigma * maturity.sqrt();
    let d1 = (fwd / strike).ln() / vol_t + 0.5 * vol_t;
    let d2 = d1 - vol_t;
    Ok(disc * (fwd * norm_cdf(d1) - strike * norm_cdf(d2)))
}

/// Sensitivity of the call value to `sigma`.
pub fn bs_vega(cfg: &MarketConfig, strike: f64, maturity: f64, sigma: f64) -> Result<f64> {
    validate_contract(cfg, strike, maturity)?;
    validate_positive(sigma, "sigma")?;
    let disc = (-cfg.r * maturity).exp();
    let fwd = cfg.forward(maturity);
    let vol_t = sigma * maturity.sqrt();
    let d1 = (fwd / strike).ln() / vol_t + 0.5 * vol_t;
    Ok(disc * fwd * norm_pdf(d1) * maturity.sqrt())
}

/// Newton solver controls for [`implied_vol`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IvSolverConfig {
    /// Absolute price tolerance.
    pub tolerance: f64,
    pub max_iter: usize,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl Default for IvSolverConfig {
    fn default() -> Self {
        IvSolverConfig { tolerance: 1e-5, max_iter: 200, sigma_lo: 1e-4, sigma_hi: 5.0 }
    }
}

impl IvSolverConfig {
    pub fn validate(&self) -> Result<()> {
        validate_positive(self.tolerance, "tolerance")?;
        validate_positive(self.sigma_lo, "sigma_lo")?;
        if !(self.sigma_lo < self.sigma_hi) {
            return Err(IvsError::invalid(format!(
                "sigma_lo {} must be below sigma_hi {}",
                self.sigma_lo, self.sigma_hi
            )));
        }
        if self.max_iter == 0 {
            return Err(IvsError::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

// Beyond the price tolerance the iteration keeps going until the remaining
// price gap pins sigma down to this many units of vol, so recovered vols are
// accurate in vol space even where vega is small. When vega underflows
// entirely the bracket-width stop below takes over.
const SIGMA_RESOLUTION: f64 = 1e-9;

/// Implied volatility of a call `price` by safeguarded Newton iteration.
///
/// The iterate always stays inside a maintained bisection bracket within
/// `[sigma_lo, sigma_hi]`; a bisection step replaces Newton whenever the
/// Newton step leaves the bracket or vega drops below 1e-12. Prices outside
/// the open no-arbitrage band (e^{−rτ}·max(F−K,0), S0·e^{−qτ}) are rejected,
/// as are prices whose volatility falls outside the solver bounds.
pub fn implied_vol(
    cfg: &MarketConfig,
    strike: f64,
    maturity: f64,
    price: f64,
    solver: &IvSolverConfig,
) -> Result<f64> {
    validate_contract(cfg, strike, maturity)?;
    validate_finite(price, "price")?;
    solver.validate()?;

    let disc = (-cfg.r * maturity).exp();
    let fwd = cfg.forward(maturity);
    let lower = disc * (fwd - strike).max(0.0);
    let upper = cfg.s0 * (-cfg.q * maturity).exp();
    if price <= lower || price >= upper {
        return Err(IvsError::PriceOutsideBand { price, lower, upper });
    }

    let mut lo = solver.sigma_lo;
    let mut hi = solver.sigma_hi;
    let f_lo = bs_call_price(cfg, strike, maturity, lo)? - price;
    if f_lo >= 0.0 {
        return if f_lo <= solver.tolerance {
            Ok(lo)
        } else {
            Err(IvsError::NonConvergence {
                message: format!("implied vol below sigma_lo {lo}"),
            })
        };
    }
    let f_hi = bs_call_price(cfg, strike, maturity, hi)? - price;
    if f_hi <= 0.0 {
        return if -f_hi <= solver.tolerance {
            Ok(hi)
        } else {
            Err(IvsError::NonConvergence {
                message: format!("implied vol above sigma_hi {hi}"),
            })
        };
    }

    // ATM-style warm start from the forward price of the straddle half,
    // clamped into the bracket; the safeguard covers the wings where this
    // estimate is poor.
    let mut sigma =
        ((2.0 * std::f64::consts::PI / maturity).sqrt() * price / (disc * fwd)).clamp(lo, hi);
    if sigma <= lo || sigma >= hi {
        sigma = 0.5 * (lo + hi);
    }

    for _ in 0..solver.max_iter {
        let diff = bs_call_price(cfg, strike, maturity, sigma)? - price;
        let vega = bs_vega(cfg, strike, maturity, sigma)?;
        if diff.abs() <= solver.tolerance && diff.abs() <= vega * SIGMA_RESOLUTION {
            return Ok(sigma);
        }
        if diff < 0.0 {
            lo = sigma;
        } else {
            hi = sigma;
        }
        if hi - lo <= f64::EPSILON * (1.0 + hi) {
            // The bracket has collapsed to machine width: the price carries
            // no finer volatility information.
            return Ok(0.5 * (lo + hi));
        }
        let newton = sigma - diff / vega;
        sigma = if vega < 1e-12 || !newton.is_finite() || newton <= lo || newton >= hi {
            0.5 * (lo + hi)
        } else {
            newton
        };
    }
    Err(IvsError::NonConvergence {
        message: format!("implied vol: no convergence after {} iterations", solver.max_iter),
    })
}

/// True when a 1e-6 shift of `sigma` moves the call price by more than a few
/// ulps, i.e. when `sigma` is recoverable from the 64-bit price at all.
/// Deep-ITM short-dated low-vol contracts price to their intrinsic bound to
/// machine precision and fail this.
pub fn vol_identifiable(cfg: &MarketConfig, strike: f64, maturity: f64, sigma: f64) -> bool {
    let Ok(price) = bs_call_price(cfg, strike, maturity, sigma) else {
        return false;
    };
    let Ok(vega) = bs_vega(cfg, strike, maturity, sigma) else {
        return false;
    };
    vega * 1e-6 >= 8.0 * (price * f64::EPSILON)
}
