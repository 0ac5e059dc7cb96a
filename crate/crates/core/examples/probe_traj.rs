use ivsforge::black_scholes::IvSolverConfig;
use ivsforge::heston::{builtin_presets, heston_iv_surface, FftConfig};
use ivsforge::market_data::{generate_market_design, MarketConfig};
use ivsforge::mtgp::{fit_mtgp, MtgpFitOptions};
use ivsforge::optim::NelderMeadOptions;
use ivsforge::sabr::{
    calibrate_term_structure, generate_synthetic_dataset, CalibrationBounds, SynthesisConfig,
};

fn main() {
    let cfg = MarketConfig::default();
    let solver = IvSolverConfig::default();
    let fft = FftConfig::default();
    let contracts = generate_market_design(&cfg);
    let presets = builtin_presets();

    for name in ["Base", "Term Structure Down", "Mixed Regime"] {
        let p = presets.iter().find(|p| p.name == name).unwrap();
        let target = heston_iv_surface(&p.params, &cfg, &contracts, &solver, &fft).unwrap();
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
        print!("{name:<22}");
        for iters in [10usize, 20, 40, 80, 150] {
            let opts = MtgpFitOptions { max_iter: iters, ..MtgpFitOptions::default() };
            let m = fit_mtgp(&source, &target, &cfg, &opts).unwrap();
            print!(" it{iters}:corr={:.3}", m.task_diagnostics().cross_correlation);
        }
        println!();
    }
}
