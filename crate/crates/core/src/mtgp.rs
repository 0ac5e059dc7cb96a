//! Multitask Gaussian process with learned task embeddings (intrinsic
//! coregionalization).
//!
//! A dense synthetic source surface and the sparse market target share one
//! Matern 5/2 input kernel k while a 2x2 task covariance C couples them:
//!
//! ```text
//! C[Z,Z'] = sigma_h^2 exp(-||e_Z - e_Z'||^2 / l_h^2) + kappa_Z^2 delta_ZZ',
//! cov((Z,x), (Z',x')) = C[Z,Z'] * k(x, x'),
//! ```
//!
//! where the task embeddings e_S, e_T in R^d' are latent vectors drawn from
//! a shared Gaussian prior N(mu_e, sigma_e^2 I). Stacking the source block
//! before the target block gives observations y ~ N(0, A) with
//! A = K o C + Sigma (o is the Hadamard product against the blockwise task
//! covariance, Sigma the per-task diagonal noise). Training minimizes the
//! penalized objective
//!
//! ```text
//! L = 1/2 y' A^-1 y + 1/2 ln|A| + n/2 ln(2 pi)
//!   + sum_Z [ ||e_Z - mu_e||^2 / (2 sigma_e^2) + d'/2 ln sigma_e^2 ],
//! ```
//!
//! i.e. the exact marginal likelihood plus the negative log prior of the
//! embeddings, jointly over the embeddings, mu_e, sigma_e^2, sigma_h^2, l_h,
//! the task-specific variances kappa^2, both noise variances, and the input
//! lengthscales. The input kernel variance stays fixed at 1: it only ever
//! appears multiplied by the task covariance, so it is not identifiable next
//! to sigma_h^2.
//!
//! Predictions target the market task. With k* stacking C_TS * k(x*, X_S)
//! over the source block and C_TT * k(x*, X_T) over the target block,
//!
//! ```text
//! mu*     = k*' A^-1 y + y_bar,
//! sigma*^2 = C_TT * k(x*, x*) - k*' A^-1 k*.
//! ```
//!
//! The embedding geometry is gauge-free: translating e_S, e_T and mu_e by
//! one common vector changes nothing observable, so diagnostics report only
//! gauge-invariant quantities (task covariance, correlation, variance
//! fractions).

use ndarray::{Array1, Array2};
use ndarray_linalg::cholesky::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validate_positive, IvsError, Result};
use crate::gp::{factorize_with_jitter, Matern52Kernel, Normalizer, SCALE_MAX, SCALE_MIN};
use crate::market_data::{MarketConfig, QuoteSet, Task};
use crate::optim::{lbfgs, LbfgsOptions};

/// Floor for the two task noise variances. The multitask likelihood builds
/// its noise diagonal directly, so it is not bound to the single-task
/// likelihood's conservative default; a lower bound lets the target block
/// retain most of the quote precision while still ruling out exact
/// interpolation, which is what gives the transfer room to matter.
pub const MTGP_NOISE_FLOOR: f64 = 2.5e-5;

/// Floor for the embedding prior variance. The objective learns sigma_e^2
/// while also dividing by it, so coincident embeddings form a singular
/// attractor: the prior's log normalizer rewards e_S = e_T = mu_e with
/// sigma_e^2 at the floor by -ln(floor) nats regardless of the data. A
/// microscopic floor lets that reward overwhelm the likelihood and pins the
/// task correlation at 1; flooring at a moderate value keeps the prior
/// proper while leaving the coupling decision to the data.
pub const PRIOR_VAR_FLOOR: f64 = 1e-2;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Embedding side of the task covariance: latent task vectors, their shared
/// prior, and the scale parameters of the embedding kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbeddingParams {
    pub e_source: Vec<f64>,
    pub e_target: Vec<f64>,
    pub prior_mean: Vec<f64>,
    /// sigma_e^2, variance of the embedding prior.
    pub prior_var: f64,
    /// sigma_h^2, variance shared across tasks.
    pub shared_var: f64,
    /// l_h, lengthscale of the embedding kernel.
    pub embedding_lengthscale: f64,
}

impl TaskEmbeddingParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.e_source.len();
        if d == 0 {
            return Err(IvsError::invalid("embedding dimension must be at least 1"));
        }
        if self.e_target.len() != d || self.prior_mean.len() != d {
            return Err(IvsError::invalid(format!(
                "embedding dimensions disagree: source {}, target {}, prior mean {}",
                d,
                self.e_target.len(),
                self.prior_mean.len()
            )));
        }
        for v in self.e_source.iter().chain(&self.e_target).chain(&self.prior_mean) {
            if !v.is_finite() {
                return Err(IvsError::invalid("embeddings must be finite"));
            }
        }
        validate_positive(self.prior_var, "prior_var")?;
        validate_positive(self.shared_var, "shared_var")?;
        validate_positive(self.embedding_lengthscale, "embedding_lengthscale")?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.e_source.len()
    }

    /// exp(-||e_S - e_T||^2 / l_h^2), the embedding-kernel factor of the
    /// cross-task covariance.
    pub fn embedding_cross(&self) -> f64 {
        let d2: f64 = self
            .e_source
            .iter()
            .zip(&self.e_target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-d2 / self.embedding_lengthscale.powi(2)).exp()
    }
}

/// Complete hyperparameter set of the coregionalized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcmHyperParams {
    pub input_kernel: Matern52Kernel,
    pub task: TaskEmbeddingParams,
    /// kappa_S^2, source-specific variance on top of the shared part.
    pub task_var_source: f64,
    /// kappa_T^2.
    pub task_var_target: f64,
    pub noise_var_source: f64,
    pub noise_var_target: f64,
}

impl IcmHyperParams {
    pub fn validate(&self) -> Result<()> {
        self.input_kernel.validate()?;
        self.task.validate()?;
        for (v, name) in [(self.task_var_source, "task_var_source"), (self.task_var_target, "task_var_target")] {
            if !v.is_finite() || v < 0.0 {
                return Err(IvsError::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        validate_positive(self.noise_var_source, "noise_var_source")?;
        validate_positive(self.noise_var_target, "noise_var_target")?;
        Ok(())
    }

    fn task_var(&self, z: Task) -> f64 {
        match z {
            Task::Source => self.task_var_source,
            Task::Target => self.task_var_target,
        }
    }

    pub fn noise_var(&self, z: Task) -> f64 {
        match z {
            Task::Source => self.noise_var_source,
            Task::Target => self.noise_var_target,
        }
    }

    /// Task covariance C[Z,Z'] = sigma_h^2 exp(-||e_Z - e_Z'||^2 / l_h^2)
    /// + kappa_Z^2 delta_ZZ'.
    pub fn task_cov(&self, a: Task, b: Task) -> f64 {
        if a == b {
            self.task.shared_var + self.task_var(a)
        } else {
            self.task.shared_var * self.task.embedding_cross()
        }
    }
}

/// Gauge-invariant summary of the fitted task relationship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDiagnostics {
    /// C_ST / sqrt(C_SS * C_TT).
    pub cross_correlation: f64,
    /// [[C_SS, C_ST], [C_ST, C_TT]].
    pub task_covariance: [[f64; 2]; 2],
    /// sigma_h^2 / (sigma_h^2 + kappa_Z^2) per task.
    pub shared_fraction_source: f64,
    pub shared_fraction_target: f64,
    /// kappa_Z^2 / (sigma_h^2 + kappa_Z^2) per task.
    pub task_specific_fraction_source: f64,
    pub task_specific_fraction_target: f64,
}

/// Joint covariance of the stacked inputs without observation noise: block
/// (Z, Z') equals C[Z,Z'] * k(X_Z, X_Z'). Inputs must already be normalized
/// consistently (one shared [`Normalizer`]).
pub fn joint_cov_matrix(
    hyper: &IcmHyperParams,
    x_source: &Array2<f64>,
    x_target: &Array2<f64>,
) -> Array2<f64> {
    let m = x_source.nrows();
    let n_total = m + x_target.nrows();
    let row = |i: usize| -> [f64; 2] {
        if i < m {
            [x_source[[i, 0]], x_source[[i, 1]]]
        } else {
            [x_target[[i - m, 0]], x_target[[i - m, 1]]]
        }
    };
    let c_ss = hyper.task_cov(Task::Source, Task::Source);
    let c_st = hyper.task_cov(Task::Source, Task::Target);
    let c_tt = hyper.task_cov(Task::Target, Task::Target);
    let mut cov = Array2::<f64>::zeros((n_total, n_total));
    for i in 0..n_total {
        for j in i..n_total {
            let c = match (i < m, j < m) {
                (true, true) => c_ss,
                (false, false) => c_tt,
                _ => c_st,
            };
            let v = c * hyper.input_kernel.eval(row(i), row(j));
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    cov
}

/// Number of unconstrained parameters for embedding dimension `d_prime`.
pub fn theta_len(d_prime: usize) -> usize {
    3 * d_prime + 9
}

/// Parameters the optimizer sees. Layout, for embedding dimension d':
///
/// ```text
/// [ e_S (d') | e_T (d') | mu_e (d') | ln sigma_e^2* | ln sigma_h^2 | ln l_h
///   | ln kappa_S^2 | ln kappa_T^2 | ln l_K | ln l_tau
///   | ln sigma_S^2* | ln sigma_T^2* ]
/// ```
///
/// Starred entries sit on additive floors (prior variance and noises), the
/// other exponentials are clamped to the same range the single-task GP uses.
/// The input kernel variance is fixed at 1 and does not appear.
fn unpack_hyper(theta: &[f64], d_prime: usize) -> (IcmHyperParams, [bool; 4]) {
    let d = d_prime;
    let e = |t: f64| t.clamp(-60.0, 60.0).exp();
    let b = 3 * d;
    let raw_sh = e(theta[b + 1]);
    let raw_lh = e(theta[b + 2]);
    let raw_lk = e(theta[b + 5]);
    let raw_lt = e(theta[b + 6]);
    let shared_var = raw_sh.clamp(SCALE_MIN, SCALE_MAX);
    let l_h = raw_lh.clamp(SCALE_MIN, SCALE_MAX);
    let l_k = raw_lk.clamp(SCALE_MIN, SCALE_MAX);
    let l_t = raw_lt.clamp(SCALE_MIN, SCALE_MAX);
    let hyper = IcmHyperParams {
        input_kernel: Matern52Kernel { variance: 1.0, lengthscales: [l_k, l_t] },
        task: TaskEmbeddingParams {
            e_source: theta[0..d].to_vec(),
            e_target: theta[d..2 * d].to_vec(),
            prior_mean: theta[2 * d..3 * d].to_vec(),
            prior_var: PRIOR_VAR_FLOOR + e(theta[b]),
            shared_var,
            embedding_lengthscale: l_h,
        },
        task_var_source: e(theta[b + 3]),
        task_var_target: e(theta[b + 4]),
        noise_var_source: MTGP_NOISE_FLOOR + e(theta[b + 7]),
        noise_var_target: MTGP_NOISE_FLOOR + e(theta[b + 8]),
    };
    let clamped = [raw_sh != shared_var, raw_lh != l_h, raw_lk != l_k, raw_lt != l_t];
    (hyper, clamped)
}

/// Negative log prior of the embeddings (up to parameter-free constants).
fn embedding_prior(task: &TaskEmbeddingParams) -> f64 {
    let d = task.dim() as f64;
    let mut dist = 0.0;
    for (e, m) in task.e_source.iter().zip(&task.prior_mean) {
        dist += (e - m) * (e - m);
    }
    for (e, m) in task.e_target.iter().zip(&task.prior_mean) {
        dist += (e - m) * (e - m);
    }
    dist / (2.0 * task.prior_var) + d * task.prior_var.ln()
}

/// Penalized marginal likelihood of the stacked data and, when requested,
/// its analytic gradient in the unconstrained coordinates described at
/// [`unpack_hyper`]. `x` stacks normalized source rows before target rows,
/// `m_source` is the source block size. Factorization failures surface as a
/// non-finite objective so a line search can retreat.
pub fn map_objective(
    x: &Array2<f64>,
    y: &Array1<f64>,
    m_source: usize,
    d_prime: usize,
    theta: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    assert_eq!(theta.len(), theta_len(d_prime), "theta length mismatch");
    let n = x.nrows();
    let (hyper, clamped) = unpack_hyper(theta, d_prime);
    let cov = assemble_cov(x, m_source, &hyper);
    let scale = hyper.task_cov(Task::Source, Task::Source).max(hyper.task_cov(Task::Target, Task::Target));
    let factor = match factorize_with_jitter(&cov, scale, hyper.noise_var_source.min(hyper.noise_var_target)) {
        Ok((f, _)) => f,
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
    let nlml = 0.5 * y.dot(&alpha)
        + 0.5 * factor.ln_detc()
        + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let objective = nlml + embedding_prior(&hyper.task);

    let g = match grad {
        Some(g) => g,
        None => return objective,
    };
    let inv = match factor.invc() {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };

    // One pass over the pair geometry collects every block sum the chain
    // rule needs: S_b(W) = sum over block b of P_ij W_ij with
    // P = A^-1 - alpha alpha', W in {k, dk/d ln l_K, dk/d ln l_tau}, plus
    // the per-task diagonal traces for the noises.
    let [l_k, l_t] = hyper.input_kernel.lengthscales;
    let mut s_k = [0.0; 3]; // SS, ST, TT
    let mut s_g0 = [0.0; 3];
    let mut s_g1 = [0.0; 3];
    let mut tr = [0.0; 2]; // source, target diagonal traces of P
    for i in 0..n {
        for j in i..n {
            let w = if i == j { 1.0 } else { 2.0 };
            let p = inv[[i, j]] - alpha[i] * alpha[j];
            let block = match (i < m_source, j < m_source) {
                (true, true) => 0,
                (false, false) => 2,
                _ => 1,
            };
            let q0 = ((x[[i, 0]] - x[[j, 0]]) / l_k).powi(2);
            let q1 = ((x[[i, 1]] - x[[j, 1]]) / l_t).powi(2);
            let r = (q0 + q1).sqrt();
            let decay = (-SQRT5 * r).exp();
            let kij = (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * decay;
            let c = (5.0 / 3.0) * (1.0 + SQRT5 * r) * decay;
            s_k[block] += w * p * kij;
            s_g0[block] += w * p * c * q0;
            s_g1[block] += w * p * c * q1;
            if i == j {
                tr[if i < m_source { 0 } else { 1 }] += p;
            }
        }
    }

    let d = d_prime;
    let b = 3 * d;
    let task = &hyper.task;
    let sh = task.shared_var;
    let lh = task.embedding_lengthscale;
    let se = task.prior_var;
    let cross = task.embedding_cross();
    let c_ss = hyper.task_cov(Task::Source, Task::Source);
    let c_st = sh * cross;
    let c_tt = hyper.task_cov(Task::Target, Task::Target);

    // embeddings and prior mean (raw coordinates)
    let mut prior_sq = 0.0;
    for m in 0..d {
        let delta = task.e_source[m] - task.e_target[m];
        let data = -sh * cross * delta / lh.powi(2) * s_k[1];
        let ps = (task.e_source[m] - task.prior_mean[m]) / se;
        let pt = (task.e_target[m] - task.prior_mean[m]) / se;
        g[m] = data + ps;
        g[d + m] = -data + pt;
        g[2 * d + m] = -ps - pt;
        prior_sq += (task.e_source[m] - task.prior_mean[m]).powi(2)
            + (task.e_target[m] - task.prior_mean[m]).powi(2);
    }
    // ln sigma_e^2 through the additive floor
    g[b] = (se - PRIOR_VAR_FLOOR) * (d as f64 / se - prior_sq / (2.0 * se * se));
    // ln sigma_h^2: the shared variance enters every block
    g[b + 1] = if clamped[0] {
        0.0
    } else {
        0.5 * sh * (s_k[0] + s_k[2]) + 0.5 * sh * cross * s_k[1]
    };
    // ln l_h through the cross block only
    let mut emb_d2 = 0.0;
    for m in 0..d {
        emb_d2 += (task.e_source[m] - task.e_target[m]).powi(2);
    }
    g[b + 2] = if clamped[1] { 0.0 } else { sh * cross * emb_d2 / lh.powi(2) * s_k[1] };
    // ln kappa^2, one diagonal block each
    g[b + 3] = 0.5 * hyper.task_var_source * s_k[0];
    g[b + 4] = 0.5 * hyper.task_var_target * s_k[2];
    // input lengthscales enter every block through k
    g[b + 5] = if clamped[2] {
        0.0
    } else {
        0.5 * (c_ss * s_g0[0] + c_st * s_g0[1] + c_tt * s_g0[2])
    };
    g[b + 6] = if clamped[3] {
        0.0
    } else {
        0.5 * (c_ss * s_g1[0] + c_st * s_g1[1] + c_tt * s_g1[2])
    };
    // noises through their floors
    g[b + 7] = 0.5 * tr[0] * (hyper.noise_var_source - MTGP_NOISE_FLOOR);
    g[b + 8] = 0.5 * tr[1] * (hyper.noise_var_target - MTGP_NOISE_FLOOR);

    objective
}

fn assemble_cov(x: &Array2<f64>, m_source: usize, hyper: &IcmHyperParams) -> Array2<f64> {
    let n = x.nrows();
    let c_ss = hyper.task_cov(Task::Source, Task::Source);
    let c_st = hyper.task_cov(Task::Source, Task::Target);
    let c_tt = hyper.task_cov(Task::Target, Task::Target);
    let mut cov = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let xi = [x[[i, 0]], x[[i, 1]]];
        for j in i..n {
            let c = match (i < m_source, j < m_source) {
                (true, true) => c_ss,
                (false, false) => c_tt,
                _ => c_st,
            };
            let v = c * hyper.input_kernel.eval(xi, [x[[j, 0]], x[[j, 1]]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
        cov[[i, i]] += hyper.noise_var(if i < m_source { Task::Source } else { Task::Target });
    }
    cov
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MtgpFitOptions {
    /// Embedding dimension d'.
    pub d_prime: usize,
    pub init_input_lengthscale: f64,
    pub max_iter: usize,
    /// Randomized restarts after the deterministic run. The stacked systems
    /// are large, so the default relies on the documented initialization
    /// alone.
    pub restarts: usize,
    pub restart_spread: f64,
    pub seed: u64,
}

impl Default for MtgpFitOptions {
    fn default() -> Self {
        MtgpFitOptions {
            d_prime: 1,
            init_input_lengthscale: 0.5,
            max_iter: 150,
            restarts: 0,
            restart_spread: 1.0,
            seed: 42,
        }
    }
}

impl MtgpFitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.d_prime == 0 {
            return Err(IvsError::invalid("d_prime must be at least 1"));
        }
        validate_positive(self.init_input_lengthscale, "init_input_lengthscale")?;
        if self.max_iter == 0 {
            return Err(IvsError::invalid("max_iter must be positive"));
        }
        if !self.restart_spread.is_finite() || self.restart_spread < 0.0 {
            return Err(IvsError::invalid("restart_spread must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Trained multitask model. Immutable and shareable; prediction is
/// reentrant.
#[derive(Debug, Clone)]
pub struct MtgpModel {
    hyper: IcmHyperParams,
    normalizer: Normalizer,
    /// Pooled normalized inputs, source rows first.
    x: Array2<f64>,
    m_source: usize,
    weights: Array1<f64>,
    cov_inv: Array2<f64>,
    objective: f64,
    nlml: f64,
    jitter: f64,
    converged: bool,
}

impl MtgpModel {
    /// Builds the model at explicitly given hyperparameters, skipping the
    /// optimization (and its floors).
    pub fn with_hyperparams(
        source: &QuoteSet,
        target: &QuoteSet,
        cfg: &MarketConfig,
        hyper: IcmHyperParams,
    ) -> Result<MtgpModel> {
        hyper.validate()?;
        let (normalizer, x, y, m_source) = stacked_training_set(source, target, cfg)?;
        MtgpModel::build(hyper, normalizer, x, y, m_source, true)
    }

    fn build(
        hyper: IcmHyperParams,
        normalizer: Normalizer,
        x: Array2<f64>,
        y: Array1<f64>,
        m_source: usize,
        converged: bool,
    ) -> Result<MtgpModel> {
        let cov = assemble_cov(&x, m_source, &hyper);
        let scale = hyper
            .task_cov(Task::Source, Task::Source)
            .max(hyper.task_cov(Task::Target, Task::Target));
        let (factor, jitter) =
            factorize_with_jitter(&cov, scale, hyper.noise_var_source.min(hyper.noise_var_target))?;
        let weights = factor.solvec(&y).map_err(|e| IvsError::numerical(e.to_string()))?;
        let n = y.len() as f64;
        let nlml = 0.5 * y.dot(&weights)
            + 0.5 * factor.ln_detc()
            + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        let objective = nlml + embedding_prior(&hyper.task);
        let cov_inv = factor.invc().map_err(|e| IvsError::numerical(e.to_string()))?;
        Ok(MtgpModel {
            hyper,
            normalizer,
            x,
            m_source,
            weights,
            cov_inv,
            objective,
            nlml,
            jitter,
            converged,
        })
    }

    pub fn hyper(&self) -> &IcmHyperParams {
        &self.hyper
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn m_source(&self) -> usize {
        self.m_source
    }

    pub fn n_target(&self) -> usize {
        self.x.nrows() - self.m_source
    }

    /// Penalized objective (marginal likelihood plus embedding prior) at the
    /// stored hyperparameters.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn nlml(&self) -> f64 {
        self.nlml
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// False when the optimizer exhausted its budget and the model holds the
    /// best point seen rather than a converged one.
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Predictive mean and strictly positive latent variance on the target
    /// task at raw (strike, maturity) points.
    pub fn predict_target(&self, points: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
        let n = self.x.nrows();
        let m = points.len();
        if m == 0 {
            return (Vec::new(), Vec::new());
        }
        let c_ts = self.hyper.task_cov(Task::Target, Task::Source);
        let c_tt = self.hyper.task_cov(Task::Target, Task::Target);
        let kernel = &self.hyper.input_kernel;
        let mut kstar = Array2::<f64>::zeros((m, n));
        for (p, &(strike, maturity)) in points.iter().enumerate() {
            let xq = self.normalizer.input(strike, maturity);
            for i in 0..n {
                let coef = if i < self.m_source { c_ts } else { c_tt };
                kstar[[p, i]] = coef * kernel.eval(xq, [self.x[[i, 0]], self.x[[i, 1]]]);
            }
        }
        let mean_part = kstar.dot(&self.weights);
        let quad = kstar.dot(&self.cov_inv);
        let prior_var = c_tt * kernel.variance;
        let floor = prior_var * 1e-12;
        let mut means = Vec::with_capacity(m);
        let mut vars = Vec::with_capacity(m);
        for p in 0..m {
            means.push(mean_part[p] + self.normalizer.target_shift);
            let mut explained = 0.0;
            for i in 0..n {
                explained += quad[[p, i]] * kstar[[p, i]];
            }
            vars.push((prior_var - explained).max(floor));
        }
        (means, vars)
    }

    /// Task-relationship summary computed from the fitted hyperparameters.
    pub fn task_diagnostics(&self) -> TaskDiagnostics {
        let c_ss = self.hyper.task_cov(Task::Source, Task::Source);
        let c_st = self.hyper.task_cov(Task::Source, Task::Target);
        let c_tt = self.hyper.task_cov(Task::Target, Task::Target);
        let sh = self.hyper.task.shared_var;
        TaskDiagnostics {
            cross_correlation: c_st / (c_ss * c_tt).sqrt(),
            task_covariance: [[c_ss, c_st], [c_st, c_tt]],
            shared_fraction_source: sh / (sh + self.hyper.task_var_source),
            shared_fraction_target: sh / (sh + self.hyper.task_var_target),
            task_specific_fraction_source: self.hyper.task_var_source / (sh + self.hyper.task_var_source),
            task_specific_fraction_target: self.hyper.task_var_target / (sh + self.hyper.task_var_target),
        }
    }
}

fn stacked_training_set(
    source: &QuoteSet,
    target: &QuoteSet,
    cfg: &MarketConfig,
) -> Result<(Normalizer, Array2<f64>, Array1<f64>, usize)> {
    if source.task != Task::Source {
        return Err(IvsError::invalid("first quote set must be labeled Source"));
    }
    if target.task != Task::Target {
        return Err(IvsError::invalid("second quote set must be labeled Target"));
    }
    let normalizer = Normalizer::fit_many(&[source, target], cfg)?;
    let m = source.len();
    let n = m + target.len();
    let mut x = Array2::<f64>::zeros((n, 2));
    let mut y = Array1::<f64>::zeros(n);
    for (i, q) in source.quotes().iter().chain(target.quotes()).enumerate() {
        let xi = normalizer.input(q.strike, q.maturity);
        x[[i, 0]] = xi[0];
        x[[i, 1]] = xi[1];
        y[i] = q.iv - normalizer.target_shift;
    }
    Ok((normalizer, x, y, m))
}

/// Jointly optimizes every hyperparameter of the coregionalized model by
/// L-BFGS on [`map_objective`], starting from mild coupling: embeddings at
/// -0.5 and +0.5 per coordinate, prior mean zero, unit prior variance and
/// embedding lengthscale, shared variance at the pooled target variance,
/// kappa^2 at a tenth of it, and noises at 1e-4 (source) and 1e-6 (target).
///
/// An exhausted iteration budget is not an error: the best point seen is
/// kept and the model is flagged via [`MtgpModel::converged`].
pub fn fit_mtgp(
    source: &QuoteSet,
    target: &QuoteSet,
    cfg: &MarketConfig,
    opts: &MtgpFitOptions,
) -> Result<MtgpModel> {
    opts.validate()?;
    let (normalizer, x, y, m_source) = stacked_training_set(source, target, cfg)?;
    let d = opts.d_prime;
    let target_var = (y.dot(&y) / y.len() as f64).max(SCALE_MIN);

    let mut theta0 = Vec::with_capacity(theta_len(d));
    theta0.extend(std::iter::repeat(-0.5).take(d)); // e_S
    theta0.extend(std::iter::repeat(0.5).take(d)); // e_T
    theta0.extend(std::iter::repeat(0.0).take(d)); // mu_e
    theta0.push((1.0 - PRIOR_VAR_FLOOR).ln()); // sigma_e^2 = 1
    theta0.push(target_var.ln()); // sigma_h^2
    theta0.push(0.0); // l_h = 1
    theta0.push((0.1 * target_var).ln()); // kappa_S^2
    theta0.push((0.1 * target_var).ln()); // kappa_T^2
    theta0.push(opts.init_input_lengthscale.ln()); // l_K
    theta0.push(opts.init_input_lengthscale.ln()); // l_tau
    theta0.push((1e-4f64).ln()); // sigma_S^2 starts at floor + synthetic noise scale
    theta0.push((1e-6f64).ln()); // sigma_T^2 starts just above the floor

    let lopts = LbfgsOptions { max_iter: opts.max_iter, ..LbfgsOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for run in 0..=opts.restarts {
        let start: Vec<f64> = if run == 0 {
            theta0.clone()
        } else {
            theta0
                .iter()
                .map(|t| t + rng.gen_range(-opts.restart_spread..=opts.restart_spread))
                .collect()
        };
        let res = lbfgs(|t, g| map_objective(&x, &y, m_source, d, t, Some(g)), &start, &lopts);
        if !res.f_min.is_finite() {
            continue;
        }
        let better = best.as_ref().map_or(true, |(f, _, _)| res.f_min < *f);
        if better {
            best = Some((res.f_min, res.x_min, res.converged));
        }
    }
    let (_, theta_best, converged) = best.ok_or_else(|| {
        IvsError::numerical("mtgp fit failed: no run produced a finite objective")
    })?;
    if !converged {
        log::warn!("mtgp fit exhausted its iteration budget; keeping the best point seen");
    }
    let (hyper, _) = unpack_hyper(&theta_best, d);
    MtgpModel::build(hyper, normalizer, x, y, m_source, converged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpModel;
    use crate::market_data::OptionQuote;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn quote(strike: f64, maturity: f64, iv: f64) -> OptionQuote {
        OptionQuote { strike, maturity, iv }
    }

    fn toy_hyper() -> IcmHyperParams {
        IcmHyperParams {
            input_kernel: Matern52Kernel { variance: 1.0, lengthscales: [0.3, 0.9] },
            task: TaskEmbeddingParams {
                e_source: vec![-0.3],
                e_target: vec![0.4],
                prior_mean: vec![0.0],
                prior_var: 1.0,
                shared_var: 0.05,
                embedding_lengthscale: 0.8,
            },
            task_var_source: 0.01,
            task_var_target: 0.02,
            noise_var_source: 1e-4,
            noise_var_target: 2e-4,
        }
    }

    fn toy_source() -> QuoteSet {
        QuoteSet::new(Task::Source, vec![quote(90.0, 0.5, 0.21), quote(110.0, 1.0, 0.19)]).unwrap()
    }

    fn toy_target() -> QuoteSet {
        QuoteSet::new(Task::Target, vec![quote(95.0, 0.75, 0.205), quote(105.0, 1.5, 0.195)])
            .unwrap()
    }

    /// Smooth smile used by the fitting tests.
    fn smile_iv(strike: f64, tau: f64) -> f64 {
        let m = (strike / 100.0).ln();
        0.2 + 0.05 * m * m - 0.03 * m + 0.01 * tau.sqrt()
    }

    fn smile_set(task: Task, strikes: &[f64], taus: &[f64]) -> QuoteSet {
        let mut quotes = Vec::new();
        for &t in taus {
            for &k in strikes {
                quotes.push(quote(k, t, smile_iv(k, t)));
            }
        }
        QuoteSet::new(task, quotes).unwrap()
    }

    // --- task covariance ---

    #[test]
    fn identical_embeddings_without_task_variance_collapse() {
        let mut h = toy_hyper();
        h.task.e_target = h.task.e_source.clone();
        h.task_var_source = 0.0;
        h.task_var_target = 0.0;
        let sh = h.task.shared_var;
        assert_eq!(h.task_cov(Task::Source, Task::Target), sh);
        assert_eq!(h.task_cov(Task::Source, Task::Source), sh);
        assert_eq!(h.task_cov(Task::Target, Task::Target), sh);
    }

    #[test]
    fn distant_embeddings_decouple() {
        let mut h = toy_hyper();
        h.task.e_source = vec![-1.0e4];
        h.task.e_target = vec![1.0e4];
        assert_eq!(h.task_cov(Task::Source, Task::Target), 0.0);
        assert!(h.task_cov(Task::Target, Task::Target) > 0.0);
    }

    #[test]
    fn task_cov_matches_closed_form() {
        // sigma_h^2 = 1, l_h = 1, unit embedding distance, kappa_T^2 = 0.5
        let h = IcmHyperParams {
            input_kernel: Matern52Kernel { variance: 1.0, lengthscales: [1.0, 1.0] },
            task: TaskEmbeddingParams {
                e_source: vec![0.0],
                e_target: vec![1.0],
                prior_mean: vec![0.0],
                prior_var: 1.0,
                shared_var: 1.0,
                embedding_lengthscale: 1.0,
            },
            task_var_source: 0.0,
            task_var_target: 0.5,
            noise_var_source: 1e-6,
            noise_var_target: 1e-6,
        };
        assert_relative_eq!(
            h.task_cov(Task::Source, Task::Target),
            0.36787944117144233,
            max_relative = 1e-15
        );
        assert_eq!(h.task_cov(Task::Target, Task::Target), 1.5);
    }

    // --- joint covariance ---

    #[test]
    fn joint_cov_matches_manual_expansion() {
        // Entries frozen from a manual expansion of C[Z,Z'] * k(x, x') with
        // 50-digit arithmetic on the shared normalized coordinates.
        let hyper = toy_hyper();
        let (norm, x, _, m) =
            stacked_training_set(&toy_source(), &toy_target(), &MarketConfig::default()).unwrap();
        assert_eq!(m, 2);
        assert_abs_diff_eq!(norm.target_shift, 0.2, epsilon = 1e-15);
        let cov = joint_cov_matrix(
            &hyper,
            &x.slice(ndarray::s![0..2, ..]).to_owned(),
            &x.slice(ndarray::s![2..4, ..]).to_owned(),
        );
        let noise = [1e-4, 1e-4, 2e-4, 2e-4];
        let expected = [
            [0.0601, 0.040064743548879073, 0.02211927842194857, 0.01364655378895816],
            [0.040064743548879073, 0.0601, 0.018816844180567337, 0.02047026042057598],
            [0.02211927842194857, 0.018816844180567337, 0.0702, 0.051761480871218347],
            [0.01364655378895816, 0.02047026042057598, 0.051761480871218347, 0.0702],
        ];
        for i in 0..4 {
            for j in 0..4 {
                let with_noise = cov[[i, j]] + if i == j { noise[i] } else { 0.0 };
                assert_abs_diff_eq!(with_noise, expected[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pooled_degeneracy_reduces_to_shared_kernel() {
        let mut hyper = toy_hyper();
        hyper.task.e_target = hyper.task.e_source.clone();
        hyper.task_var_source = 0.0;
        hyper.task_var_target = 0.0;
        let (_, x, _, m) =
            stacked_training_set(&toy_source(), &toy_target(), &MarketConfig::default()).unwrap();
        let xs = x.slice(ndarray::s![0..m, ..]).to_owned();
        let xt = x.slice(ndarray::s![m.., ..]).to_owned();
        let cov = joint_cov_matrix(&hyper, &xs, &xt);
        let sh = hyper.task.shared_var;
        for i in 0..4 {
            for j in 0..4 {
                let xi = [x[[i, 0]], x[[i, 1]]];
                let xj = [x[[j, 0]], x[[j, 1]]];
                let pooled = sh * hyper.input_kernel.eval(xi, xj);
                assert_abs_diff_eq!(cov[[i, j]], pooled, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn zero_cross_covariance_is_block_diagonal() {
        let mut hyper = toy_hyper();
        hyper.task.e_source = vec![-1.0e4];
        hyper.task.e_target = vec![1.0e4];
        let (_, x, _, m) =
            stacked_training_set(&toy_source(), &toy_target(), &MarketConfig::default()).unwrap();
        let xs = x.slice(ndarray::s![0..m, ..]).to_owned();
        let xt = x.slice(ndarray::s![m.., ..]).to_owned();
        let cov = joint_cov_matrix(&hyper, &xs, &xt);
        for i in 0..m {
            for j in m..4 {
                assert_eq!(cov[[i, j]], 0.0);
                assert_eq!(cov[[j, i]], 0.0);
            }
        }
    }

    // --- objective and gradient ---

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 10;
        let n = 10;
        let total = m + n;
        let mut x = Array2::<f64>::zeros((total, 2));
        for i in 0..total {
            x[[i, 0]] = rng.gen_range(-0.6..0.6);
            x[[i, 1]] = rng.gen_range(-0.5..0.5);
        }
        let y = Array1::from_iter((0..total).map(|_| rng.gen_range(-0.05..0.05)));
        let d = 1;
        let theta: Vec<f64> = vec![
            rng.gen_range(-0.8..0.8),          // e_S
            rng.gen_range(-0.8..0.8),          // e_T
            rng.gen_range(-0.3..0.3),          // mu_e
            rng.gen_range(-1.0..1.0),          // ln sigma_e^2
            rng.gen_range(-4.0..-2.0),         // ln sigma_h^2
            rng.gen_range(-0.5..0.5),          // ln l_h
            rng.gen_range(-6.0..-4.0),         // ln kappa_S^2
            rng.gen_range(-6.0..-4.0),         // ln kappa_T^2
            rng.gen_range(-1.5..0.0),          // ln l_K
            rng.gen_range(-1.5..0.0),          // ln l_tau
            rng.gen_range(-9.0..-7.0),         // ln sigma_S^2
            rng.gen_range(-9.0..-7.0),         // ln sigma_T^2
        ];
        let mut analytic = vec![0.0; theta.len()];
        map_objective(&x, &y, m, d, &theta, Some(&mut analytic));
        let numeric = crate::optim::finite_diff_gradient(
            |t| map_objective(&x, &y, m, d, t, None),
            &theta,
        );
        for i in 0..theta.len() {
            let scale = 1.0 + analytic[i].abs();
            assert!(
                (analytic[i] - numeric[i]).abs() / scale < 1e-4,
                "component {}: analytic {} vs numeric {}",
                i,
                analytic[i],
                numeric[i]
            );
        }
    }

    #[test]
    fn prior_reduces_to_log_variance_at_coincident_embeddings() {
        // e_S = e_T = mu_e makes the squared-distance part vanish, so the
        // penalty is exactly d' * ln sigma_e^2 on top of the pure marginal
        // likelihood. With sigma_e^2 = 1 the penalty is zero; changing it
        // shifts the objective by exactly d' * ln sigma_e^2 plus the
        // distance terms, which stay zero.
        let (_, x, y, m) =
            stacked_training_set(&toy_source(), &toy_target(), &MarketConfig::default()).unwrap();
        let mut hyper = toy_hyper();
        hyper.task.e_source = vec![0.2];
        hyper.task.e_target = vec![0.2];
        hyper.task.prior_mean = vec![0.2];

        let pack = |sigma_e2: f64| -> Vec<f64> {
            vec![
                0.2,
                0.2,
                0.2,
                (sigma_e2 - PRIOR_VAR_FLOOR).ln(),
                hyper.task.shared_var.ln(),
                hyper.task.embedding_lengthscale.ln(),
                hyper.task_var_source.ln(),
                hyper.task_var_target.ln(),
                hyper.input_kernel.lengthscales[0].ln(),
                hyper.input_kernel.lengthscales[1].ln(),
                (hyper.noise_var_source - MTGP_NOISE_FLOOR).ln(),
                (hyper.noise_var_target - MTGP_NOISE_FLOOR).ln(),
            ]
        };
        let at_one = map_objective(&x, &y, m, 1, &pack(1.0), None);
        let at_e = map_objective(&x, &y, m, 1, &pack(std::f64::consts::E), None);
        assert_abs_diff_eq!(at_e - at_one, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn flat_prior_limit_frees_the_embeddings() {
        let (_, x, y, m) =
            stacked_training_set(&toy_source(), &toy_target(), &MarketConfig::default()).unwrap();
        let theta = |ln_se: f64| -> Vec<f64> {
            vec![-0.3, 0.4, 0.0, ln_se, 0.05f64.ln(), 0.8f64.ln(), 0.01f64.ln(), 0.02f64.ln(),
                 0.3f64.ln(), 0.9f64.ln(), (2e-4 - MTGP_NOISE_FLOOR).ln(), (3e-4 - MTGP_NOISE_FLOOR).ln()]
        };
        let mut g_wide = vec![0.0; 12];
        let mut g_wider = vec![0.0; 12];
        map_objective(&x, &y, m, 1, &theta((1e10f64).ln()), Some(&mut g_wide));
        map_objective(&x, &y, m, 1, &theta((1e14f64).ln()), Some(&mut g_wider));
        // the data part of the embedding gradient is identical; the prior
        // part scales as 1/sigma_e^2 and must be gone at both widths
        for i in 0..3 {
            assert_abs_diff_eq!(g_wide[i], g_wider[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn objective_invariant_under_embedding_translation() {
        let (_, x, y, m) =
            stacked_training_set(&toy_source(), &toy_target(), &MarketConfig::default()).unwrap();
        let base = vec![-0.3, 0.4, 0.1, 0.0, 0.05f64.ln(), 0.8f64.ln(), 0.01f64.ln(), 0.02f64.ln(),
                        0.3f64.ln(), 0.9f64.ln(), (2e-4 - MTGP_NOISE_FLOOR).ln(), (3e-4 - MTGP_NOISE_FLOOR).ln()];
        let mut shifted = base.clone();
        for i in 0..3 {
            shifted[i] += 7.3;
        }
        let f0 = map_objective(&x, &y, m, 1, &base, None);
        let f1 = map_objective(&x, &y, m, 1, &shifted, None);
        assert_abs_diff_eq!(f0, f1, epsilon = 1e-12 * (1.0 + f0.abs()));
    }

    // --- prediction ---

    #[test]
    fn toy_predictions_match_dense_reference() {
        // Reference computed with 50-digit arithmetic by solving the full
        // 4x4 stacked system independently.
        let model = MtgpModel::with_hyperparams(
            &toy_source(),
            &toy_target(),
            &MarketConfig::default(),
            toy_hyper(),
        )
        .unwrap();
        assert_eq!(model.jitter(), 0.0);
        assert_abs_diff_eq!(model.nlml(), -2.5746663697162621, epsilon = 1e-10);
        assert_abs_diff_eq!(model.objective(), -2.4496663697162621, epsilon = 1e-10);

        let (means, vars) = model.predict_target(&[(100.0, 1.0), (120.0, 0.6)]);
        assert_abs_diff_eq!(means[0], 0.20063833234051222, epsilon = 1e-10);
        assert_abs_diff_eq!(vars[0], 1.8748859724072188e-3, epsilon = 1e-10);
        assert_abs_diff_eq!(means[1], 0.19686496635098100, epsilon = 1e-10);
        assert_abs_diff_eq!(vars[1], 3.7669286913451377e-2, epsilon = 1e-10);
    }

    #[test]
    fn decoupled_model_matches_target_only_gp() {
        // Sets share the maximum maturity and the mean vol level, so the
        // pooled normalizer and the target-only normalizer agree wherever it
        // matters; the stationary kernel cancels the remaining mean shifts.
        let source = QuoteSet::new(
            Task::Source,
            vec![
                quote(80.0, 0.5, 0.23),
                quote(95.0, 0.5, 0.20),
                quote(110.0, 1.0, 0.17),
                quote(90.0, 1.5, 0.20),
            ],
        )
        .unwrap();
        let target = QuoteSet::new(
            Task::Target,
            vec![
                quote(85.0, 0.75, 0.22),
                quote(100.0, 0.75, 0.19),
                quote(105.0, 1.5, 0.18),
                quote(97.0, 1.5, 0.21),
            ],
        )
        .unwrap();
        let cfg = MarketConfig::default();
        let mut hyper = toy_hyper();
        hyper.task.e_source = vec![-1.0e4];
        hyper.task.e_target = vec![1.0e4];
        let mtgp = MtgpModel::with_hyperparams(&source, &target, &cfg, hyper.clone()).unwrap();

        let gp_kernel = Matern52Kernel {
            variance: hyper.task.shared_var + hyper.task_var_target,
            lengthscales: hyper.input_kernel.lengthscales,
        };
        let gp = GpModel::with_hyperparams(&target, &cfg, gp_kernel, hyper.noise_var_target)
            .unwrap();

        let points = vec![(88.0, 0.6), (100.0, 1.0), (112.0, 1.4), (95.0, 1.5)];
        let (m_mt, v_mt) = mtgp.predict_target(&points);
        let (m_gp, v_gp) = gp.predict(&points);
        for i in 0..points.len() {
            assert_abs_diff_eq!(m_mt[i], m_gp[i], epsilon = 1e-8);
            assert_abs_diff_eq!(v_mt[i], v_gp[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn pooled_model_matches_pooled_gp() {
        let source = smile_set(Task::Source, &[80.0, 90.0, 100.0, 110.0, 120.0], &[0.5, 1.5]);
        let target = smile_set(Task::Target, &[85.0, 95.0, 105.0, 115.0], &[0.75, 1.25]);
        let cfg = MarketConfig::default();
        let mut hyper = toy_hyper();
        hyper.task.e_source = vec![0.3];
        hyper.task.e_target = vec![0.3];
        hyper.task_var_source = 0.0;
        hyper.task_var_target = 0.0;
        hyper.noise_var_source = 2e-4;
        hyper.noise_var_target = 2e-4;
        let mtgp = MtgpModel::with_hyperparams(&source, &target, &cfg, hyper.clone()).unwrap();

        let pooled_quotes: Vec<OptionQuote> = source
            .quotes()
            .iter()
            .chain(target.quotes())
            .cloned()
            .collect();
        let pooled = QuoteSet::new(Task::Source, pooled_quotes).unwrap();
        let gp_kernel = Matern52Kernel {
            variance: hyper.task.shared_var,
            lengthscales: hyper.input_kernel.lengthscales,
        };
        let gp = GpModel::with_hyperparams(&pooled, &cfg, gp_kernel, 2e-4).unwrap();

        let points = vec![(82.0, 0.6), (98.0, 0.9), (107.0, 1.2), (118.0, 1.45)];
        let (m_mt, v_mt) = mtgp.predict_target(&points);
        let (m_gp, v_gp) = gp.predict(&points);
        for i in 0..points.len() {
            assert_abs_diff_eq!(m_mt[i], m_gp[i], epsilon = 1e-8);
            assert_abs_diff_eq!(v_mt[i], v_gp[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn predictive_variance_bounded_by_target_prior() {
        let model = MtgpModel::with_hyperparams(
            &toy_source(),
            &toy_target(),
            &MarketConfig::default(),
            toy_hyper(),
        )
        .unwrap();
        let cap = model.hyper().task_cov(Task::Target, Task::Target)
            * model.hyper().input_kernel.variance;
        let mut points = Vec::new();
        for step in 0..20 {
            points.push((70.0 + 4.0 * step as f64, 0.3 + 0.1 * step as f64));
        }
        let (_, vars) = model.predict_target(&points);
        for v in vars {
            assert!(v > 0.0);
            assert!(v <= cap * (1.0 + 1e-9));
        }
    }

    // --- fitting ---

    #[test]
    fn identical_tasks_couple_strongly() {
        let strikes = [75.0, 85.0, 95.0, 105.0, 115.0, 130.0];
        let taus = [0.25, 0.75, 1.5, 2.5];
        let source = smile_set(Task::Source, &strikes, &taus);
        let target = smile_set(Task::Target, &strikes, &taus);
        let model =
            fit_mtgp(&source, &target, &MarketConfig::default(), &MtgpFitOptions::default())
                .unwrap();
        let diag = model.task_diagnostics();
        assert!(
            diag.cross_correlation > 0.9,
            "identical tasks should couple, got correlation {}",
            diag.cross_correlation
        );
        assert!(diag.cross_correlation <= 1.0 + 1e-12);
    }

    #[test]
    fn conflicting_target_decouples() {
        // The target smile disagrees with the source smoothly (flipped skew,
        // curvature, and term slope over the same strike range), so the
        // residual is correlated across quotes and is cheaper to explain
        // through the target-specific kernel block than through observation
        // noise. Iid disagreement would not decouple anything: the learned
        // target noise absorbs it and the correlation stays put.
        let strikes_s = [70.0, 80.0, 90.0, 100.0, 110.0, 120.0];
        let strikes_t = [76.0, 88.0, 100.0, 112.0, 124.0];
        let taus = [0.25, 0.75, 1.5, 2.5];
        let source = smile_set(Task::Source, &strikes_s, &taus);
        let mut quotes = Vec::new();
        for &t in &taus {
            for &k in &strikes_t {
                let m = (k / 100.0_f64).ln();
                quotes.push(quote(k, t, 0.2 - 0.05 * m * m + 0.04 * m - 0.01 * t.sqrt()));
            }
        }
        let target = QuoteSet::new(Task::Target, quotes).unwrap();
        let conflicted =
            fit_mtgp(&source, &target, &MarketConfig::default(), &MtgpFitOptions::default())
                .unwrap();

        let twin_target = smile_set(Task::Target, &strikes_t, &taus);
        let twin =
            fit_mtgp(&source, &twin_target, &MarketConfig::default(), &MtgpFitOptions::default())
                .unwrap();

        let c_conflicted = conflicted.task_diagnostics().cross_correlation;
        let c_twin = twin.task_diagnostics().cross_correlation;
        assert!(
            c_twin - c_conflicted > 0.15,
            "conflicting data should decouple: twin {} vs conflicted {}",
            c_twin,
            c_conflicted
        );
    }

    #[test]
    fn objective_not_worse_than_initialization() {
        let source = smile_set(Task::Source, &[80.0, 90.0, 100.0, 110.0, 120.0], &[0.5, 1.0, 2.0]);
        let target = smile_set(Task::Target, &[84.0, 96.0, 108.0], &[0.6, 1.4]);
        let cfg = MarketConfig::default();
        let model = fit_mtgp(&source, &target, &cfg, &MtgpFitOptions::default()).unwrap();

        let ivs: Vec<f64> = source
            .quotes()
            .iter()
            .chain(target.quotes())
            .map(|q| q.iv)
            .collect();
        let mean = ivs.iter().sum::<f64>() / ivs.len() as f64;
        let tv = (ivs.iter().map(|iv| (iv - mean).powi(2)).sum::<f64>() / ivs.len() as f64)
            .max(SCALE_MIN);
        let init = IcmHyperParams {
            input_kernel: Matern52Kernel { variance: 1.0, lengthscales: [0.5, 0.5] },
            task: TaskEmbeddingParams {
                e_source: vec![-0.5],
                e_target: vec![0.5],
                prior_mean: vec![0.0],
                prior_var: 1.0,
                shared_var: tv,
                embedding_lengthscale: 1.0,
            },
            task_var_source: 0.1 * tv,
            task_var_target: 0.1 * tv,
            noise_var_source: 1e-4,
            noise_var_target: 1e-6,
        };
        let init_model = MtgpModel::with_hyperparams(&source, &target, &cfg, init).unwrap();
        assert!(model.objective() <= init_model.objective() + 1e-9);
    }

    #[test]
    fn exhausted_budget_keeps_best_point_with_flag() {
        let source = smile_set(Task::Source, &[80.0, 100.0, 120.0], &[0.5, 1.5]);
        let target = smile_set(Task::Target, &[90.0, 110.0], &[0.75]);
        let opts = MtgpFitOptions { max_iter: 1, ..MtgpFitOptions::default() };
        let model = fit_mtgp(&source, &target, &MarketConfig::default(), &opts).unwrap();
        assert!(!model.converged());
        assert!(model.objective().is_finite());
    }

    #[test]
    fn rejects_mislabeled_tasks() {
        let a = smile_set(Task::Target, &[90.0, 110.0], &[0.5]);
        let b = smile_set(Task::Target, &[95.0, 105.0], &[0.75]);
        let err = fit_mtgp(&a, &b, &MarketConfig::default(), &MtgpFitOptions::default())
            .unwrap_err();
        assert!(matches!(err, IvsError::InvalidInput { .. }));
    }

    // --- diagnostics ---

    #[test]
    fn diagnostics_follow_their_definitions() {
        let mut hyper = toy_hyper();
        hyper.task_var_target = 0.0;
        let model = MtgpModel::with_hyperparams(
            &toy_source(),
            &toy_target(),
            &MarketConfig::default(),
            hyper.clone(),
        )
        .unwrap();
        let diag = model.task_diagnostics();
        assert_eq!(diag.shared_fraction_target, 1.0);
        assert_eq!(diag.task_specific_fraction_target, 0.0);
        assert_abs_diff_eq!(
            diag.shared_fraction_source + diag.task_specific_fraction_source,
            1.0,
            epsilon = 1e-15
        );
        assert!(diag.cross_correlation > 0.0 && diag.cross_correlation < 1.0);
        assert_eq!(diag.task_covariance[0][1], diag.task_covariance[1][0]);

        // coincident embeddings: correlation from the variance ratio alone
        let mut h2 = toy_hyper();
        h2.task.e_target = h2.task.e_source.clone();
        let m2 = MtgpModel::with_hyperparams(
            &toy_source(),
            &toy_target(),
            &MarketConfig::default(),
            h2.clone(),
        )
        .unwrap();
        let sh = h2.task.shared_var;
        let expected =
            sh / ((sh + h2.task_var_source) * (sh + h2.task_var_target)).sqrt();
        assert_relative_eq!(m2.task_diagnostics().cross_correlation, expected, max_relative = 1e-14);
    }

    #[test]
    fn correlation_invariant_under_joint_translation() {
        let mut shifted = toy_hyper();
        for v in shifted
            .task
            .e_source
            .iter_mut()
            .chain(shifted.task.e_target.iter_mut())
            .chain(shifted.task.prior_mean.iter_mut())
        {
            *v += 11.25;
        }
        let cfg = MarketConfig::default();
        let base =
            MtgpModel::with_hyperparams(&toy_source(), &toy_target(), &cfg, toy_hyper()).unwrap();
        let moved =
            MtgpModel::with_hyperparams(&toy_source(), &toy_target(), &cfg, shifted).unwrap();
        assert_abs_diff_eq!(
            base.task_diagnostics().cross_correlation,
            moved.task_diagnostics().cross_correlation,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(base.objective(), moved.objective(), epsilon = 1e-12);
    }

    #[test]
    fn diagnostics_serialize_round_trip() {
        let model = MtgpModel::with_hyperparams(
            &toy_source(),
            &toy_target(),
            &MarketConfig::default(),
            toy_hyper(),
        )
        .unwrap();
        let diag = model.task_diagnostics();
        let json = serde_json::to_string(&diag).unwrap();
        let back: TaskDiagnostics = serde_json::from_str(&json).unwrap();
        assert_eq!(diag, back);
        let hp_json = serde_json::to_string(model.hyper()).unwrap();
        let hp: IcmHyperParams = serde_json::from_str(&hp_json).unwrap();
        assert_eq!(&hp, model.hyper());
    }

    // --- end to end on generated data ---

    #[test]
    fn transfers_structure_from_sabr_source_to_heston_target() {
        use crate::black_scholes::IvSolverConfig;
        use crate::heston::{builtin_presets, FftConfig};
        use crate::market_data::generate_market_design;
        use crate::optim::NelderMeadOptions;
        use crate::sabr::{calibrate_term_structure, generate_synthetic_dataset, CalibrationBounds, SynthesisConfig};

        let cfg = MarketConfig::default();
        let presets = builtin_presets();
        let base = presets.iter().find(|p| p.name == "Base").unwrap();
        let contracts = generate_market_design(&cfg);
        let target = heston_iv_surface_for_test(&base.params, &cfg, &contracts);

        let (ts, _) = calibrate_term_structure(
            &target,
            &cfg,
            0.5,
            &CalibrationBounds::default(),
            &NelderMeadOptions::default(),
        )
        .unwrap();
        let syn = SynthesisConfig {
            grid_n_strikes: 12,
            grid_n_maturities: 8,
            ..SynthesisConfig::default()
        };
        let source = generate_synthetic_dataset(&ts, &cfg, &syn).unwrap();

        let model = fit_mtgp(&source, &target, &cfg, &MtgpFitOptions::default()).unwrap();
        let diag = model.task_diagnostics();
        assert!(
            diag.cross_correlation > 0.0 && diag.cross_correlation < 1.0,
            "correlation {} out of the open interval",
            diag.cross_correlation
        );
        assert!(diag.shared_fraction_source > 0.0);
        assert!(diag.shared_fraction_target > 0.0);

        // predictions at market contracts should sit close to the quotes
        let points: Vec<(f64, f64)> =
            target.quotes().iter().map(|q| (q.strike, q.maturity)).collect();
        let (means, _) = model.predict_target(&points);
        let mut sq = 0.0;
        for (mean, q) in means.iter().zip(target.quotes()) {
            sq += (mean - q.iv).powi(2);
        }
        let rmse = (sq / means.len() as f64).sqrt();
        assert!(rmse < 0.01, "in-sample rmse {} too large", rmse);

        fn heston_iv_surface_for_test(
            p: &crate::heston::HestonParams,
            cfg: &MarketConfig,
            contracts: &[(f64, f64)],
        ) -> QuoteSet {
            crate::heston::heston_iv_surface(
                p,
                cfg,
                contracts,
                &IvSolverConfig::default(),
                &FftConfig::default(),
            )
            .unwrap()
        }
    }
}
