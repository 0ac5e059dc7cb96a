use ivsforge::gp::{fit_gp, GpFitOptions, GpModel, Matern52Kernel, Normalizer};
use ivsforge::market_data::{MarketConfig, OptionQuote, QuoteSet, Task};
use ndarray::{Array1, Array2};
use ndarray_linalg::cholesky::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn quote(strike: f64, maturity: f64, iv: f64) -> OptionQuote {
    OptionQuote { strike, maturity, iv }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let mut strikes = Vec::with_capacity(n);
    let mut taus = Vec::with_capacity(n);
    for _ in 0..n {
        strikes.push(rng.gen_range(70.0..160.0));
        taus.push(rng.gen_range(0.1..3.0));
    }
    let provisional = QuoteSet::new(
        Task::Source,
        strikes.iter().zip(&taus).map(|(&k, &t)| quote(k, t, 0.2)).collect(),
    )
    .unwrap();
    let cfg = MarketConfig::default();
    let norm = Normalizer::fit(&provisional, &cfg).unwrap();
    let truth = Matern52Kernel { variance: 0.0025, lengthscales: [0.25, 0.3] };
    let noise_sd = 0.02;

    let mut cov = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            cov[[i, j]] =
                truth.eval(norm.input(strikes[i], taus[i]), norm.input(strikes[j], taus[j]));
        }
        cov[[i, i]] += 1e-12;
    }
    let chol = cov.cholesky(UPLO::Lower).unwrap();
    let z = Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let f = chol.dot(&z);
    let quotes = QuoteSet::new(
        Task::Source,
        (0..n)
            .map(|i| {
                let eps: f64 = rng.sample(StandardNormal);
                quote(strikes[i], taus[i], 0.2 + f[i] + noise_sd * eps)
            })
            .collect(),
    )
    .unwrap();

    let model = fit_gp(&quotes, &cfg, &GpFitOptions::default()).unwrap();
    let hp = model.hyperparams();
    println!(
        "fitted: var={:.5e} ls=({:.4},{:.4}) noise={:.5e} nlml={:.4}",
        hp.kernel.variance,
        hp.kernel.lengthscales[0],
        hp.kernel.lengthscales[1],
        hp.noise_var,
        model.nlml()
    );
    let at_truth =
        GpModel::with_hyperparams(&quotes, &cfg, truth.clone(), noise_sd * noise_sd).unwrap();
    println!("truth:  nlml={:.4}", at_truth.nlml());

    // normalized input ranges, to sanity-check scale of the lengthscales
    let xs: Vec<[f64; 2]> =
        strikes.iter().zip(&taus).map(|(&k, &t)| norm.input(k, t)).collect();
    let (mut k_lo, mut k_hi, mut t_lo, mut t_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for x in &xs {
        k_lo = k_lo.min(x[0]);
        k_hi = k_hi.max(x[0]);
        t_lo = t_lo.min(x[1]);
        t_hi = t_hi.max(x[1]);
    }
    println!("normalized ranges: strike [{k_lo:.3},{k_hi:.3}] tau [{t_lo:.3},{t_hi:.3}]");
}
