use ivsforge::black_scholes::IvSolverConfig;
use ivsforge::heston::{builtin_presets, heston_iv_surface, FftConfig};
use ivsforge::market_data::{generate_market_design, MarketConfig};
use ivsforge::optim::NelderMeadOptions;
use ivsforge::sabr::{calibrate_term_structure, surface_iv, CalibrationBounds};

fn main() {
    let cfg = MarketConfig::default();
    let solver = IvSolverConfig::default();
    let fft = FftConfig::default();
    let contracts = generate_market_design(&cfg);

    for p in builtin_presets() {
        let target = heston_iv_surface(&p.params, &cfg, &contracts, &solver, &fft).unwrap();
        let (ts, fits) = calibrate_term_structure(
            &target,
            &cfg,
            0.5,
            &CalibrationBounds::default(),
            &NelderMeadOptions::default(),
        )
        .unwrap();
        // residual of the interpolated SABR surface on the quote grid
        let mut sq = 0.0;
        for q in target.quotes() {
            let iv = surface_iv(&ts, &cfg, q.strike, q.maturity);
            sq += (iv - q.iv).powi(2);
        }
        let rmse_grid = (sq / target.len() as f64).sqrt();
        // mean per-slice calibration objective (at quote maturities)
        let mean_obj =
            fits.iter().map(|f| f.objective.sqrt()).sum::<f64>() / fits.len() as f64;
        println!(
            "{:<22} quote-grid rmse={:.4e}  mean slice rms={:.4e}",
            p.name, rmse_grid, mean_obj
        );
    }
}
