//! Single-task Gaussian process regression on implied volatility quotes.
//!
//! The surface iv(K, tau) is modelled as a Gaussian process over normalized
//! coordinates with a Matern 5/2 covariance
//!
//! ```text
//! k(x, x') = v * (1 + sqrt(5) r + 5 r^2 / 3) * exp(-sqrt(5) r),
//! r^2 = sum_d (x_d - x'_d)^2 / l_d^2,
//! ```
//!
//! homoskedastic observation noise sigma^2, and a constant mean handled by
//! centering the targets. Hyperparameters (v, l_K, l_tau, sigma^2) minimize
//! the negative log marginal likelihood
//!
//! ```text
//! NLML = 1/2 y' A^-1 y + 1/2 ln det A + n/2 ln(2 pi),   A = K + sigma^2 I,
//! ```
//!
//! via L-BFGS in log-parameter space with a few randomized restarts, since
//! the marginal likelihood is multimodal. Predictions use the standard
//! conditioning formulas
//!
//! ```text
//! mean(x*) = k*' A^-1 y + y_bar,    var(x*) = k(x*, x*) - k*' A^-1 k*.
//! ```
//!
//! Raw strike and maturity scales differ by roughly two orders of magnitude,
//! which cripples a shared lengthscale initialization, so inputs are rescaled
//! (strikes by spot, maturities by the largest quoted maturity) and shifted
//! to zero mean before any kernel evaluation.

use ndarray::{Array1, Array2, OwnedRepr};
use ndarray_linalg::cholesky::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validate_positive, IvsError, Result};
use crate::market_data::{MarketConfig, QuoteSet};
use crate::optim::{lbfgs, LbfgsOptions};

/// Smallest admissible observation noise variance for fitted models,
/// matching the conventional Gaussian-likelihood lower bound of mainstream
/// GP toolkits. On noise-free targets the marginal likelihood otherwise
/// drives the noise to zero and the posterior degenerates into exact
/// interpolation of the quote set.
pub const NOISE_FLOOR: f64 = 1e-4;

/// Clamp range for the signal variance and the lengthscales in normalized
/// units. An unidentifiable dimension can push its lengthscale arbitrarily
/// high without improving the fit; the cap keeps the parameterization finite.
pub const SCALE_MIN: f64 = 1e-6;
pub const SCALE_MAX: f64 = 1e6;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Relative jitter ladder applied when a covariance matrix fails to
/// factorize: start at `1e-10 * variance` and escalate tenfold up to
/// `1e-4 * variance` before giving up. Dense systems with over a thousand
/// points reuse this kernel path, so the ladder has to cope with
/// near-duplicate inputs.
const JITTER_START_REL: f64 = 1e-10;
const JITTER_MAX_REL: f64 = 1e-4;

/// Matern 5/2 covariance with a separate lengthscale per input dimension
/// (moneyness-like normalized strike and normalized maturity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matern52Kernel {
    pub variance: f64,
    pub lengthscales: [f64; 2],
}

impl Matern52Kernel {
    pub fn validate(&self) -> Result<()> {
        validate_positive(self.variance, "kernel variance")?;
        validate_positive(self.lengthscales[0], "strike lengthscale")?;
        validate_positive(self.lengthscales[1], "maturity lengthscale")?;
        Ok(())
    }

    /// Covariance between two (already normalized) input points.
    pub fn eval(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let q0 = ((a[0] - b[0]) / self.lengthscales[0]).powi(2);
        let q1 = ((a[1] - b[1]) / self.lengthscales[1]).powi(2);
        let r = (q0 + q1).sqrt();
        let s = SQRT5 * r;
        self.variance * (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
    }
}

/// Affine input/output maps fitted on the training quotes: strikes are
/// scaled by spot, maturities by the largest quoted maturity, both shifted
/// to zero mean; targets are centered by the mean implied volatility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub strike_scale: f64,
    pub tau_scale: f64,
    pub strike_shift: f64,
    pub tau_shift: f64,
    pub target_shift: f64,
}

impl Normalizer {
    pub fn fit(quotes: &QuoteSet, cfg: &MarketConfig) -> Result<Self> {
        Normalizer::fit_many(&[quotes], cfg)
    }

    /// Fits the maps on the union of several quote sets, so that models
    /// trained on stacked data (multitask) and on the individual sets share
    /// one coordinate system.
    pub fn fit_many(sets: &[&QuoteSet], cfg: &MarketConfig) -> Result<Self> {
        cfg.validate()?;
        if sets.is_empty() {
            return Err(IvsError::invalid("no quote sets to normalize"));
        }
        let all = sets.iter().flat_map(|s| s.quotes().iter());
        let n = sets.iter().map(|s| s.len()).sum::<usize>() as f64;
        let tau_scale = all.clone().map(|q| q.maturity).fold(f64::NEG_INFINITY, f64::max);
        let mut strike_shift = 0.0;
        let mut tau_shift = 0.0;
        let mut target_shift = 0.0;
        for q in all {
            strike_shift += q.strike / cfg.s0;
            tau_shift += q.maturity / tau_scale;
            target_shift += q.iv;
        }
        Ok(Normalizer {
            strike_scale: cfg.s0,
            tau_scale,
            strike_shift: strike_shift / n,
            tau_shift: tau_shift / n,
            target_shift: target_shift / n,
        })
    }

    /// Normalized coordinates of a raw (strike, maturity) pair.
    pub fn input(&self, strike: f64, maturity: f64) -> [f64; 2] {
        [strike / self.strike_scale - self.strike_shift, maturity / self.tau_scale - self.tau_shift]
    }
}

/// Fitted hyperparameters in natural units, serializable for
/// reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub kernel: Matern52Kernel,
    pub noise_var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpFitOptions {
    /// Initial lengthscale in normalized units, shared by both dimensions.
    pub init_lengthscale: f64,
    pub init_noise: f64,
    /// Randomized restarts run after the deterministic one; the best final
    /// NLML wins.
    pub restarts: usize,
    /// Half-width of the uniform log-space perturbation applied at each
    /// restart.
    pub restart_spread: f64,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            init_lengthscale: 0.5,
            init_noise: 1e-4,
            restarts: 3,
            restart_spread: 1.5,
            seed: 42,
            max_iter: 200,
        }
    }
}

impl GpFitOptions {
    pub fn validate(&self) -> Result<()> {
        validate_positive(self.init_lengthscale, "init_lengthscale")?;
        validate_positive(self.init_noise, "init_noise")?;
        if !self.restart_spread.is_finite() || self.restart_spread < 0.0 {
            return Err(IvsError::invalid("restart_spread must be finite and >= 0"));
        }
        if self.max_iter == 0 {
            return Err(IvsError::invalid("max_iter must be positive"));
        }
        Ok(())
    }
}

/// Trained Gaussian process. Immutable once built; prediction is reentrant.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: Matern52Kernel,
    noise_var: f64,
    normalizer: Normalizer,
    train_inputs: Array2<f64>,
    /// A^-1 (y - y_bar), the representer weights.
    weights: Array1<f64>,
    /// Full inverse of A = K + sigma^2 I (+ jitter), kept for predictive
    /// variances.
    cov_inv: Array2<f64>,
    nlml: f64,
    jitter: f64,
}

impl GpModel {
    /// Builds a model at explicitly given hyperparameters, skipping the
    /// marginal-likelihood optimization. The noise floor is not applied
    /// here, so interpolation limits (noise -> 0) can be exercised.
    pub fn with_hyperparams(
        quotes: &QuoteSet,
        cfg: &MarketConfig,
        kernel: Matern52Kernel,
        noise_var: f64,
    ) -> Result<GpModel> {
        kernel.validate()?;
        validate_positive(noise_var, "noise_var")?;
        let normalizer = Normalizer::fit(quotes, cfg)?;
        let (x, y) = normalized_training_set(quotes, &normalizer);
        GpModel::build(kernel, noise_var, normalizer, x, y)
    }

    fn build(
        kernel: Matern52Kernel,
        noise_var: f64,
        normalizer: Normalizer,
        x: Array2<f64>,
        y: Array1<f64>,
    ) -> Result<GpModel> {
        let cov = build_cov(&x, &kernel, noise_var);
        let (factor, jitter) = factorize_with_jitter(&cov, kernel.variance, noise_var)?;
        let weights = factor.solvec(&y).map_err(|e| IvsError::numerical(e.to_string()))?;
        let n = y.len() as f64;
        let nlml = 0.5 * y.dot(&weights)
            + 0.5 * factor.ln_detc()
            + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        let cov_inv = factor.invc().map_err(|e| IvsError::numerical(e.to_string()))?;
        Ok(GpModel { kernel, noise_var, normalizer, train_inputs: x, weights, cov_inv, nlml, jitter })
    }

    pub fn kernel(&self) -> &Matern52Kernel {
        &self.kernel
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Negative log marginal likelihood of the training data at the stored
    /// hyperparameters.
    pub fn nlml(&self) -> f64 {
        self.nlml
    }

    /// Absolute diagonal jitter that had to be added before the covariance
    /// factorized; zero in the common well-conditioned case.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn hyperparams(&self) -> GpHyperParams {
        GpHyperParams { kernel: self.kernel.clone(), noise_var: self.noise_var }
    }

    /// Predictive means and latent variances at raw (strike, maturity)
    /// points. Variances are floored at a small positive multiple of the
    /// signal variance so they stay strictly positive even at duplicated
    /// training inputs.
    pub fn predict(&self, points: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
        let n = self.train_inputs.nrows();
        let m = points.len();
        if m == 0 {
            return (Vec::new(), Vec::new());
        }
        let mut kstar = Array2::<f64>::zeros((m, n));
        for (p, &(strike, maturity)) in points.iter().enumerate() {
            let xq = self.normalizer.input(strike, maturity);
            for i in 0..n {
                let xi = [self.train_inputs[[i, 0]], self.train_inputs[[i, 1]]];
                kstar[[p, i]] = self.kernel.eval(xq, xi);
            }
        }
        let mean_part = kstar.dot(&self.weights);
        let quad = kstar.dot(&self.cov_inv);
        let floor = self.kernel.variance * 1e-12;
        let mut means = Vec::with_capacity(m);
        let mut vars = Vec::with_capacity(m);
        for p in 0..m {
            means.push(mean_part[p] + self.normalizer.target_shift);
            let mut explained = 0.0;
            for i in 0..n {
                explained += quad[[p, i]] * kstar[[p, i]];
            }
            vars.push((self.kernel.variance - explained).max(floor));
        }
        (means, vars)
    }
}

fn normalized_training_set(quotes: &QuoteSet, norm: &Normalizer) -> (Array2<f64>, Array1<f64>) {
    let n = quotes.len();
    let mut x = Array2::<f64>::zeros((n, 2));
    let mut y = Array1::<f64>::zeros(n);
    for (i, q) in quotes.quotes().iter().enumerate() {
        let xi = norm.input(q.strike, q.maturity);
        x[[i, 0]] = xi[0];
        x[[i, 1]] = xi[1];
        y[i] = q.iv - norm.target_shift;
    }
    (x, y)
}

fn build_cov(x: &Array2<f64>, kernel: &Matern52Kernel, noise_var: f64) -> Array2<f64> {
    let n = x.nrows();
    let mut cov = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let xi = [x[[i, 0]], x[[i, 1]]];
        for j in i..n {
            let xj = [x[[j, 0]], x[[j, 1]]];
            let k = kernel.eval(xi, xj);
            cov[[i, j]] = k;
            cov[[j, i]] = k;
        }
        cov[[i, i]] += noise_var;
    }
    cov
}

/// Cholesky factorization with the escalating jitter ladder. Returns the
/// factorization together with the absolute jitter that was required.
pub(crate) fn factorize_with_jitter(
    cov: &Array2<f64>,
    variance: f64,
    noise_var: f64,
) -> Result<(CholeskyFactorized<OwnedRepr<f64>>, f64)> {
    if let Ok(f) = cov.factorizec(UPLO::Lower) {
        return Ok((f, 0.0));
    }
    let mut rel = JITTER_START_REL;
    while rel <= JITTER_MAX_REL * (1.0 + 1e-12) {
        let jitter = rel * variance;
        let mut bumped = cov.clone();
        for d in 0..bumped.nrows() {
            bumped[[d, d]] += jitter;
        }
        if let Ok(f) = bumped.factorizec(UPLO::Lower) {
            return Ok((f, jitter));
        }
        rel *= 10.0;
    }
    Err(IvsError::numerical(format!(
        "covariance not positive definite after jitter escalation to {:.1e} (n = {}, variance = {:.3e}, noise = {:.3e})",
        JITTER_MAX_REL * variance,
        cov.nrows(),
        variance,
        noise_var,
    )))
}

/// Log-parameter vector layout: [ln variance, ln l_K, ln l_tau, ln noise].
/// The exponentials are clamped to keep runaway line-search steps finite,
/// and the noise sits on an additive floor.
fn unpack_theta(theta: &[f64]) -> (Matern52Kernel, f64, [bool; 3]) {
    let e = |t: f64| t.clamp(-60.0, 60.0).exp();
    let raw_v = e(theta[0]);
    let raw_l0 = e(theta[1]);
    let raw_l1 = e(theta[2]);
    let variance = raw_v.clamp(SCALE_MIN, SCALE_MAX);
    let l0 = raw_l0.clamp(SCALE_MIN, SCALE_MAX);
    let l1 = raw_l1.clamp(SCALE_MIN, SCALE_MAX);
    let noise = NOISE_FLOOR + e(theta[3]);
    let clamped = [raw_v != variance, raw_l0 != l0, raw_l1 != l1];
    (Matern52Kernel { variance, lengthscales: [l0, l1] }, noise, clamped)
}

/// NLML and, when requested, its analytic gradient in the log parameters.
/// The gradient uses d NLML / d theta = 1/2 tr((A^-1 - a a') dA/d theta)
/// with a = A^-1 y, fused into one pass over the pair geometry. Components
/// whose parameter sits on a clamp get a zero gradient, matching the flat
/// parameterization there.
fn nlml_objective(
    x: &Array2<f64>,
    y: &Array1<f64>,
    theta: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let (kernel, noise, clamped) = unpack_theta(theta);
    let cov = build_cov(x, &kernel, noise);
    let (factor, _) = match factorize_with_jitter(&cov, kernel.variance, noise) {
        Ok(f) => f,
        Err(_) => {
            if let Some(g) = grad {
                g.iter_mut().for_each(|gi| *gi = 0.0);
            }
            return f64::INFINITY;
        }
    };
    let alpha = match factor.solvec(y) {
        Ok(a) => a,
        Err(_) => return f64::INFINITY,
    };
    let n = y.len();
    let nlml = 0.5 * y.dot(&alpha)
        + 0.5 * factor.ln_detc()
        + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let g = match grad {
        Some(g) => g,
        None => return nlml,
    };
    let inv = match factor.invc() {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };
    let v = kernel.variance;
    let [l0, l1] = kernel.lengthscales;
    let mut acc = [0.0; 4];
    for i in 0..n {
        for j in i..n {
            let w = if i == j { 1.0 } else { 2.0 };
            let p = inv[[i, j]] - alpha[i] * alpha[j];
            let q0 = ((x[[i, 0]] - x[[j, 0]]) / l0).powi(2);
            let q1 = ((x[[i, 1]] - x[[j, 1]]) / l1).powi(2);
            let r = (q0 + q1).sqrt();
            let decay = (-SQRT5 * r).exp();
            let kij = v * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * decay;
            // dk/d ln l_d = (5/3) v (1 + sqrt(5) r) exp(-sqrt(5) r) q_d
            let c = v * (5.0 / 3.0) * (1.0 + SQRT5 * r) * decay;
            acc[0] += w * p * kij;
            acc[1] += w * p * c * q0;
            acc[2] += w * p * c * q1;
            if i == j {
                acc[3] += p;
            }
        }
    }
    g[0] = if clamped[0] { 0.0 } else { 0.5 * acc[0] };
    g[1] = if clamped[1] { 0.0 } else { 0.5 * acc[1] };
    g[2] = if clamped[2] { 0.0 } else { 0.5 * acc[2] };
    g[3] = 0.5 * acc[3] * (noise - NOISE_FLOOR);
    nlml
}

/// Fits GP hyperparameters by L-BFGS on the NLML in log-parameter space.
///
/// Starts from lengthscales of `init_lengthscale` in normalized units, the
/// target variance as signal variance, and `init_noise`, then reruns from
/// randomized log-space perturbations and keeps the best final NLML.
pub fn fit_gp(quotes: &QuoteSet, cfg: &MarketConfig, opts: &GpFitOptions) -> Result<GpModel> {
    opts.validate()?;
    if quotes.len() < 2 {
        return Err(IvsError::invalid(format!(
            "gp fit needs at least 2 quotes, got {}",
            quotes.len()
        )));
    }
    let normalizer = Normalizer::fit(quotes, cfg)?;
    let (x, y) = normalized_training_set(quotes, &normalizer);
    let target_var = (y.dot(&y) / y.len() as f64).max(SCALE_MIN);
    let theta0 = [
        target_var.ln(),
        opts.init_lengthscale.ln(),
        opts.init_lengthscale.ln(),
        opts.init_noise.ln(),
    ];

    let lopts = LbfgsOptions { max_iter: opts.max_iter, ..LbfgsOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for run in 0..=opts.restarts {
        let start: Vec<f64> = if run == 0 {
            theta0.to_vec()
        } else {
            theta0
                .iter()
                .map(|t| t + rng.gen_range(-opts.restart_spread..=opts.restart_spread))
                .collect()
        };
        let res = lbfgs(|t, g| nlml_objective(&x, &y, t, Some(g)), &start, &lopts);
        if !res.f_min.is_finite() {
            continue;
        }
        let better = best.as_ref().map_or(true, |(f, _, _)| res.f_min < *f);
        if better {
            best = Some((res.f_min, res.x_min, res.converged));
        }
    }
    let (_, theta_best, converged) = best.ok_or_else(|| {
        IvsError::numerical("gp fit failed: no restart produced a finite marginal likelihood")
    })?;
    if !converged {
        log::warn!("gp fit kept a non-converged restart's best point");
    }
    let (kernel, noise, _) = unpack_theta(&theta_best);
    GpModel::build(kernel, noise, normalizer, x, y)
}
