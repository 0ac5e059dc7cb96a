use ivsforge::black_scholes::IvSolverConfig;
use ivsforge::gp::{fit_gp, GpFitOptions, GpModel};
use ivsforge::heston::{builtin_presets, heston_iv_surface, FftConfig};
use ivsforge::market_data::{generate_market_design, MarketConfig};

fn main() {
    let presets = builtin_presets();
    let base = presets.iter().find(|p| p.name == "Base").unwrap();
    let cfg = MarketConfig::default();
    let solver = IvSolverConfig::default();
    let fft = FftConfig::default();

    let contracts = generate_market_design(&cfg);
    let target = heston_iv_surface(&base.params, &cfg, &contracts, &solver, &fft).unwrap();
    println!("target quotes: {}", target.len());

    let opts = GpFitOptions { seed: 42, ..GpFitOptions::default() };
    let model = fit_gp(&target, &cfg, &opts).unwrap();
    let hp = model.hyperparams();
    println!(
        "fitted: var={:.6e} ls=({:.4}, {:.4}) noise={:.6e} nlml={:.4}",
        hp.kernel.variance,
        hp.kernel.lengthscales[0],
        hp.kernel.lengthscales[1],
        hp.noise_var,
        model.nlml()
    );

    // eval grid tau=0.3, strikes 80..140, 61 points
    let taus = [0.3_f64, 0.9, 2.2];
    for &tau in &taus {
        let pts: Vec<(f64, f64)> =
            (0..61).map(|i| (80.0 + i as f64 * 1.0, tau)).collect();
        let truth =
            heston_iv_surface(&base.params, &cfg, &pts, &solver, &fft).unwrap();
        let mut pred_pts = Vec::new();
        let mut truth_iv = Vec::new();
        for q in truth.quotes() {
            pred_pts.push((q.strike, q.maturity));
            truth_iv.push(q.iv);
        }
        let (mean, _) = model.predict(&pred_pts);
        let rmse = (mean
            .iter()
            .zip(&truth_iv)
            .map(|(m, t)| (m - t).powi(2))
            .sum::<f64>()
            / mean.len() as f64)
            .sqrt();
        println!("tau={tau}: fitted-GP rmse={:.4e}", rmse);

        // what happens if noise is pinned higher, kernel refit around it?
        for noise in [1e-6, 4e-6, 2.5e-5, 1e-4] {
            let k = hp.kernel.clone();
            let pinned = GpModel::with_hyperparams(&target, &cfg, k, noise).unwrap();
            let (mean, _) = pinned.predict(&pred_pts);
            let rmse = (mean
                .iter()
                .zip(&truth_iv)
                .map(|(m, t)| (m - t).powi(2))
                .sum::<f64>()
                / mean.len() as f64)
                .sqrt();
            println!("  noise={noise:.1e} (fitted kernel): rmse={:.4e} nlml={:.3}", rmse, pinned.nlml());
        }
    }
}
