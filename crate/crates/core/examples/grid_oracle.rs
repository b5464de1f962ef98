//! Maps the expected trial cost of the known-optimum walker over a 41×41
//! stiffness lattice and prints the empirical argmin.
//!
//! cargo run --release -p hilo-core --example grid_oracle -- 130 280 > grid.csv

use hilo_core::plant::known_optimum_params;
use hilo_core::protocol::{constant_stiffness_costs, SessionConfig};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric K*")).collect();
    let k_star = [args.first().copied().unwrap_or(130.0), args.get(1).copied().unwrap_or(280.0)];
    let config = SessionConfig {
        plant: known_optimum_params(k_star),
        ..SessionConfig::default()
    };
    let path = config.reference_path().expect("built-in path");
    let seeds: Vec<u64> = (0..20).collect();
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    println!("hip,knee,mean_cost");
    for i in 0..=40 {
        for j in 0..=40 {
            let k = [i as f64 * 10.0, j as f64 * 10.0];
            let costs = constant_stiffness_costs(&config, &path, k, &seeds);
            let mean = costs.iter().sum::<f64>() / costs.len() as f64;
            println!("{},{},{:.12e}", k[0], k[1], mean);
            if mean < best.0 {
                best = (mean, k);
            }
        }
        eprintln!("row {i} done, best so far {:?}", best);
    }
    eprintln!("argmin {:?} cost {:.12e}", best.1, best.0);
}
