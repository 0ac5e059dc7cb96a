use ivsforge::bench::{ExperimentConfig, Method};
use ivsforge::gp::{fit_gp, GpFitOptions};
use ivsforge::heston::{builtin_presets, heston_iv_surface, FftConfig};
use ivsforge::black_scholes::IvSolverConfig;
use ivsforge::market_data::{generate_market_design, MarketConfig};
use ivsforge::mtgp::{fit_mtgp, MtgpFitOptions};
use ivsforge::optim::NelderMeadOptions;
use ivsforge::sabr::{
    calibrate_term_structure, generate_synthetic_dataset, CalibrationBounds, SynthesisConfig,
};

fn main() {
    let beta: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let max_iter: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(150);
    let restarts: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let preset = builtin_presets().into_iter().find(|p| p.name == "Base").unwrap();
    let cfg = MarketConfig::default();
    let exp = ExperimentConfig { methods: vec![Method::Mtgp], ..ExperimentConfig::default() };
    let contracts = generate_market_design(&cfg);
    let target = heston_iv_surface(
        &preset.params,
        &cfg,
        &contracts,
        &IvSolverConfig::default(),
        &FftConfig::default(),
    )
    .unwrap();
    let (ts, slices) = calibrate_term_structure(
        &target,
        &cfg,
        beta,
        &CalibrationBounds::default(),
        &NelderMeadOptions::default(),
    )
    .unwrap();
    let slice_rms: Vec<f64> = slices
        .iter()
        .map(|s| (s.objective / 12.0_f64.max(1.0)).sqrt())
        .collect();
    println!(
        "beta={beta} slice rms range [{:.2e}, {:.2e}]",
        slice_rms.iter().cloned().fold(f64::MAX, f64::min),
        slice_rms.iter().cloned().fold(f64::MIN, f64::max)
    );
    let syn = SynthesisConfig { noise_sd: exp.sigma_syn, rng_seed: 42, ..SynthesisConfig::default() };
    let source = generate_synthetic_dataset(&ts, &cfg, &syn).unwrap();

    let opts = MtgpFitOptions { seed: 42, max_iter, restarts, ..MtgpFitOptions::default() };
    let t0 = std::time::Instant::now();
    let model = fit_mtgp(&source, &target, &cfg, &opts).unwrap();
    let d = model.task_diagnostics();
    let h = model.hyper();
    println!(
        "mtgp: {:.0}s converged={} objective={:.3} corr={:.4} kap_S={:.3e} kap_T={:.3e} sig_h={:.3e} noise_S={:.3e} noise_T={:.3e} ls=({:.3},{:.3})",
        t0.elapsed().as_secs_f64(),
        model.converged(),
        model.objective(),
        d.cross_correlation,
        h.task_var_source,
        h.task_var_target,
        h.task.shared_var,
        h.noise_var_source,
        h.noise_var_target,
        h.input_kernel.lengthscales[0],
        h.input_kernel.lengthscales[1],
    );

    // per-tau rmse on the eval lattice vs Heston truth
    let taus = [0.3, 0.9, 2.2];
    let strikes: Vec<f64> = (0..61).map(|i| 80.0 + i as f64).collect();
    let mut overall_se = 0.0;
    let mut overall_n = 0usize;
    for &tau in &taus {
        let truth_contracts: Vec<(f64, f64)> = strikes.iter().map(|&k| (k, tau)).collect();
        let truth = heston_iv_surface(
            &preset.params,
            &cfg,
            &truth_contracts,
            &IvSolverConfig::default(),
            &FftConfig::default(),
        )
        .unwrap();
        let pts: Vec<(f64, f64)> = truth.quotes().iter().map(|q| (q.strike, q.maturity)).collect();
        let (mean, _) = model.predict_target(&pts);
        let se: f64 = truth
            .quotes()
            .iter()
            .zip(&mean)
            .map(|(q, &p)| (q.iv - p).powi(2))
            .sum();
        overall_se += se;
        overall_n += pts.len();
        println!("  tau={tau} rmse={:.4e}", (se / pts.len() as f64).sqrt());
    }
    println!("  overall rmse={:.4e}", (overall_se / overall_n as f64).sqrt());

    let gp = fit_gp(&target, &cfg, &GpFitOptions { seed: 42, ..GpFitOptions::default() }).unwrap();
    let mut gp_se = 0.0;
    let mut gp_n = 0usize;
    for &tau in &taus {
        let truth_contracts: Vec<(f64, f64)> = strikes.iter().map(|&k| (k, tau)).collect();
        let truth = heston_iv_surface(
            &preset.params,
            &cfg,
            &truth_contracts,
            &IvSolverConfig::default(),
            &FftConfig::default(),
        )
        .unwrap();
        let pts: Vec<(f64, f64)> = truth.quotes().iter().map(|q| (q.strike, q.maturity)).collect();
        let (mean, _) = gp.predict(&pts);
        gp_se += truth
            .quotes()
            .iter()
            .zip(&mean)
            .map(|(q, &p)| (q.iv - p).powi(2))
            .sum::<f64>();
        gp_n += pts.len();
    }
    println!("gp overall rmse={:.4e}", (gp_se / gp_n as f64).sqrt());
}
