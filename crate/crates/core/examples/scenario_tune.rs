//! Tuning aid for scenario files.
//!
//! cargo run --release -p hilo-core --example scenario_tune -- <config.toml> run [subjects]
//! cargo run --release -p hilo-core --example scenario_tune -- <config.toml> grid
//! cargo run --release -p hilo-core --example scenario_tune -- <config.toml> terms [bias_scale]
//!
//! `run` plays the full protocol for consecutive seeds and prints the
//! validation means, the day-2/day-1 bias ratio and the two-way analysis.
//! `grid` locates the constant-stiffness optimum at shrinking bias levels;
//! `terms` splits the cost along the diagonal, with and without damping.

use std::path::Path;

use hilo_core::analysis::{rm_anova_twoway, table_from_reports, Metric, CONTROLLER_CONDITIONS};
use hilo_core::controller::{Deadband, ImpedanceGains, CRITICAL_DAMPING};
use hilo_core::objective::evaluate;
use hilo_core::plant::{closed_loop_trial, HumanState};
use hilo_core::protocol::{constant_stiffness_costs, Condition, Session, SessionConfig};

const GRID: usize = 8;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(file) = args.first() else {
        eprintln!("usage: scenario_tune <config.toml> [run|grid|terms] [arg]");
        std::process::exit(2);
    };
    let base = SessionConfig::load(Path::new(file)).expect("readable config");
    let arg = args.get(2);
    match args.get(1).map_or("run", String::as_str) {
        "terms" => terms(base, arg.map_or(1.0, |s| s.parse().expect("numeric scale"))),
        "grid" => grid(&base),
        _ => run(&base, arg.map_or(6, |s| s.parse().expect("numeric count"))),
    }
}

fn terms(mut base: SessionConfig, bias_scale: f64) {
    base.plant.b0 *= bias_scale;
    let path = base.reference_path().unwrap();
    let db = Deadband::from_degrees(base.deadband_deg).unwrap();
    let trial = |gains: ImpedanceGains, k: f64| {
        let mut h = HumanState::seeded(&base.plant, 1);
        let log = closed_loop_trial(&mut h, &base.plant, &path, db, gains, vec![k, k], base.ticks(base.trial_s), base.dt());
        evaluate(&log.trim_transient(base.discard_s).unwrap(), &base.weights, &base.scales()).unwrap()
    };
    for k in [0.0, 50.0, 100.0, 200.0, 300.0, 400.0] {
        let c = trial(ImpedanceGains::new([k, k], CRITICAL_DAMPING).unwrap(), k);
        let d = trial(ImpedanceGains::new([k, k], 0.0).unwrap(), k);
        println!(
            "K {k}: total {:.4} effort {:.4} tracking {:.4} stiffness {:.4} | undamped effort {:.4} tracking {:.4}",
            c.total, c.effort, c.tracking, c.stiffness, d.effort, d.tracking
        );
    }
}

fn grid(base: &SessionConfig) {
    let path = base.reference_path().unwrap();
    for scale in [1.0, 0.6, 0.36] {
        let mut cfg = base.clone();
        cfg.plant.b0 *= scale;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        let mut at_baseline = f64::NAN;
        for i in 0..=GRID {
            for j in 0..=GRID {
                let k = [400.0 * i as f64 / GRID as f64, 400.0 * j as f64 / GRID as f64];
                let c = constant_stiffness_costs(&cfg, &path, k, &[1, 2, 3]);
                let m = c.iter().sum::<f64>() / c.len() as f64;
                if m < best.0 {
                    best = (m, k);
                }
                if k == [cfg.k_baseline; 2] {
                    at_baseline = m;
                }
            }
        }
        println!("bias x{scale}: argmin {:?} cost {:.5}; baseline {at_baseline:.5}", best.1, best.0);
    }
}

fn run(base: &SessionConfig, subjects: u64) {
    let mut reports = Vec::new();
    for i in 0..subjects {
        let mut s = Session::new(SessionConfig {
            seed: base.seed + i,
            ..base.clone()
        })
        .unwrap();
        let mut bias = [Vec::new(), Vec::new()];
        while !s.is_finished() {
            bias[(s.day as usize).min(1)].push(s.human.as_ref().unwrap().b);
            s.run_trial().unwrap();
        }
        for r in &s.reports {
            let m: Vec<String> = Condition::ALL.iter().map(|c| format!("{:.5}", r.mean_total(*c))).collect();
            println!("subject {i} day {} (none, baseline, best, last mean): {}", r.day + 1, m.join(" "));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "  final mean {:?}; day-2/day-1 mean bias {:.4}",
            s.cma.clamped_mean(&s.params),
            mean(&bias[1]) / mean(&bias[0])
        );
        reports.push((format!("subject-{i}"), s.reports));
    }
    let table = table_from_reports(&reports, &CONTROLLER_CONDITIONS, Metric::Total).unwrap();
    for e in rm_anova_twoway(&table).unwrap().effects {
        println!("{} F={:.3} p={:.4}", e.name, e.f, e.p);
    }
}
