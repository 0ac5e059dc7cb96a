use ivsforge::bench::{sweep_beta, sweep_noise, ExperimentConfig, Method};

fn main() {
    let cfg = ExperimentConfig {
        methods: vec![Method::Gp, Method::Mtgp],
        ..ExperimentConfig::default()
    };
    let t0 = std::time::Instant::now();
    let noise = sweep_noise(&cfg).unwrap();
    println!("noise sweep ({:.0}s):", t0.elapsed().as_secs_f64());
    for r in &noise.rows {
        println!(
            "  level={:.3} method={:<5} rmse={:.4e} mae={:.4e}",
            r.level,
            r.method.as_str(),
            r.rmse,
            r.mae
        );
    }
    for f in &noise.failures {
        println!("  FAILURE {:?}", f);
    }
    let t1 = std::time::Instant::now();
    let beta = sweep_beta(&cfg).unwrap();
    println!("beta sweep ({:.0}s):", t1.elapsed().as_secs_f64());
    for r in &beta.rows {
        println!(
            "  level={:.2} method={:<5} rmse={:.4e} mae={:.4e}",
            r.level,
            r.method.as_str(),
            r.rmse,
            r.mae
        );
    }
    for f in &beta.failures {
        println!("  FAILURE {:?}", f);
    }
}
