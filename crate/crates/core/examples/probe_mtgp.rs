use ivsforge::black_scholes::IvSolverConfig;
use ivsforge::gp::{fit_gp, GpFitOptions};
use ivsforge::heston::{builtin_presets, heston_iv_surface, FftConfig};
use ivsforge::market_data::{generate_market_design, MarketConfig};
use ivsforge::mtgp::{fit_mtgp, IcmHyperParams, MtgpFitOptions, MtgpModel};
use ivsforge::optim::NelderMeadOptions;
use ivsforge::sabr::{
    calibrate_term_structure, generate_synthetic_dataset, CalibrationBounds, SynthesisConfig,
};

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt()
}

fn main() {
    let presets = builtin_presets();
    let base = presets.iter().find(|p| p.name == "Base").unwrap();
    let cfg = MarketConfig::default();
    let solver = IvSolverConfig::default();
    let fft = FftConfig::default();

    let contracts = generate_market_design(&cfg);
    let target = heston_iv_surface(&base.params, &cfg, &contracts, &solver, &fft).unwrap();
    let (ts, _) = calibrate_term_structure(
        &target,
        &cfg,
        0.5,
        &CalibrationBounds::default(),
        &NelderMeadOptions::default(),
    )
    .unwrap();
    let syn = SynthesisConfig { noise_sd: 0.01, rng_seed: 42, ..SynthesisConfig::default() };
    let source = generate_synthetic_dataset(&ts, &cfg, &syn).unwrap();
    println!("source {} target {}", source.len(), target.len());

    let taus = [0.3_f64, 2.2];
    let mut truth_by_tau = Vec::new();
    for &tau in &taus {
        let pts: Vec<(f64, f64)> = (0..61).map(|i| (80.0 + i as f64, tau)).collect();
        let t = heston_iv_surface(&base.params, &cfg, &pts, &solver, &fft).unwrap();
        let (ks, ivs): (Vec<f64>, Vec<f64>) =
            t.quotes().iter().map(|q| (q.strike, q.iv)).unzip();
        truth_by_tau.push((tau, ks, ivs));
    }

    let gp = fit_gp(&target, &cfg, &GpFitOptions::default()).unwrap();
    for (tau, ks, ivs) in &truth_by_tau {
        let pts: Vec<(f64, f64)> = ks.iter().map(|&k| (k, *tau)).collect();
        let (mean, _) = gp.predict(&pts);
        println!("GP tau={tau}: rmse={:.4e}", rmse(&mean, ivs));
    }
    let ghp = gp.hyperparams();
    println!(
        "GP hyper: var={:.4e} ls=({:.4},{:.4}) noise={:.4e}",
        ghp.kernel.variance, ghp.kernel.lengthscales[0], ghp.kernel.lengthscales[1], ghp.noise_var
    );

    let model = fit_mtgp(&source, &target, &cfg, &MtgpFitOptions::default()).unwrap();
    let h = model.hyper();
    println!("fitted MTGP hyper:");
    println!(
        "  e_S={:?} e_T={:?} mu={:?} sigma_e2={:.4e}",
        h.task.e_source, h.task.e_target, h.task.prior_mean, h.task.prior_var
    );
    println!(
        "  sigma_h2={:.4e} l_h={:.4} kappa_S2={:.4e} kappa_T2={:.4e}",
        h.task.shared_var, h.task.embedding_lengthscale, h.task_var_source, h.task_var_target
    );
    println!(
        "  input var={:.4e} ls=({:.4},{:.4}) noise_S={:.4e} noise_T={:.4e}",
        h.input_kernel.variance,
        h.input_kernel.lengthscales[0],
        h.input_kernel.lengthscales[1],
        h.noise_var_source,
        h.noise_var_target
    );
    let diag = model.task_diagnostics();
    println!("  corr={:.4}", diag.cross_correlation);
    for (tau, ks, ivs) in &truth_by_tau {
        let pts: Vec<(f64, f64)> = ks.iter().map(|&k| (k, *tau)).collect();
        let (mean, _) = model.predict_target(&pts);
        println!("MTGP fitted tau={tau}: rmse={:.4e}", rmse(&mean, ivs));
    }

    // Pin the correlation at several levels by separating the embeddings,
    // keeping everything else at the fitted values, and see what the
    // prediction quality and the objective would be.
    for corr_target in [0.9, 0.7, 0.5, 0.3] {
        let mut h2 = h.clone();
        let l_h = h2.task.embedding_lengthscale;
        let half = l_h * (1.0 / corr_target as f64).ln().sqrt() / 2.0;
        h2.task.e_source = vec![-half];
        h2.task.e_target = vec![half];
        h2.task.prior_mean = vec![0.0];
        let pinned = MtgpModel::with_hyperparams(&source, &target, &cfg, h2).unwrap();
        let d2 = pinned.task_diagnostics();
        print!("pinned corr={:.3}:", d2.cross_correlation);
        for (tau, ks, ivs) in &truth_by_tau {
            let pts: Vec<(f64, f64)> = ks.iter().map(|&k| (k, *tau)).collect();
            let (mean, _) = pinned.predict_target(&pts);
            print!(" rmse(tau={tau})={:.4e}", rmse(&mean, ivs));
        }
        println!();
    }

    // Same exercise, but let the target noise drop as well: the question is
    // whether trusting the target more while keeping moderate coupling is
    // what produces the good fits.
    for (corr_target, noise_t) in [(0.7, 1e-4), (0.7, 2.5e-5), (0.7, 1e-5), (0.3, 1e-5)] {
        let mut h2 = h.clone();
        let l_h = h2.task.embedding_lengthscale;
        let half = l_h * (1.0 / corr_target as f64).ln().sqrt() / 2.0;
        h2.task.e_source = vec![-half];
        h2.task.e_target = vec![half];
        h2.task.prior_mean = vec![0.0];
        h2.noise_var_target = noise_t;
        let pinned = MtgpModel::with_hyperparams(&source, &target, &cfg, h2).unwrap();
        print!("pinned corr={:.2} noise_T={:.1e}:", corr_target, noise_t);
        for (tau, ks, ivs) in &truth_by_tau {
            let pts: Vec<(f64, f64)> = ks.iter().map(|&k| (k, *tau)).collect();
            let (mean, _) = pinned.predict_target(&pts);
            print!(" rmse(tau={tau})={:.4e}", rmse(&mean, ivs));
        }
        println!();
    }

    let _ = IcmHyperParams::validate;

    for name in ["Term Structure Down", "Mixed Regime"] {
        let p = presets.iter().find(|p| p.name == name).unwrap();
        let tq = heston_iv_surface(&p.params, &cfg, &contracts, &solver, &fft).unwrap();
        let (ts, _) = calibrate_term_structure(
            &tq,
            &cfg,
            0.5,
            &CalibrationBounds::default(),
            &NelderMeadOptions::default(),
        )
        .unwrap();
        let syn = SynthesisConfig { noise_sd: 0.01, rng_seed: 42, ..SynthesisConfig::default() };
        let src = generate_synthetic_dataset(&ts, &cfg, &syn).unwrap();
        let m = fit_mtgp(&src, &tq, &cfg, &MtgpFitOptions::default()).unwrap();
        let d = m.task_diagnostics();
        println!(
            "{name}: corr={:.4} kappa_T2={:.4e} sigma_h2={:.4e} noise_T={:.4e}",
            d.cross_correlation,
            m.hyper().task_var_target,
            m.hyper().task.shared_var,
            m.hyper().noise_var_target
        );
    }
}
