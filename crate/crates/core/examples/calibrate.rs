//! Scratch calibration driver (not part of the shipped surface).

use std::time::Instant;

use ddro_core::baselines::train_baseline;
use ddro_core::config::{ExperimentConfig, Method};
use ddro_core::metrics::mse_eval;
use ddro_core::trainer::prepare;

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0]);
    let mut table: Vec<(u64, Vec<(String, Vec<f64>)>)> = Vec::new();
    for &seed in &seeds {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.seed = seed;
        let t0 = Instant::now();
        let setup = prepare(&cfg).expect("prepare");
        eprintln!(
            "seed {seed}: prepare {:.2?}, J_ref = {:.4}, eps = {:.4}",
            t0.elapsed(),
            setup.reference_loss,
            setup.epsilon
        );
        let mut rows = Vec::new();
        for method in Method::ALL {
            let t = Instant::now();
            let result = train_baseline(method, &cfg, &setup).expect("train");
            let mut mses = Vec::new();
            for (_, test) in &setup.data.tests {
                mses.push(mse_eval(&result.final_predictor, test).unwrap());
            }
            let train_mse = mse_eval(&result.final_predictor, &setup.data.train).unwrap();
            eprintln!(
                "  {:>6} {:.2?}: train {:.5} tests {:?} mean {:.5}",
                method.name(),
                t.elapsed(),
                train_mse,
                mses.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
                mses.iter().sum::<f64>() / mses.len() as f64
            );
            if method == Method::Ddro {
                let traces = &result.inner_traces;
                if let Some(tr) = traces.first() {
                    eprintln!(
                        "    inner[0]: J {:?} mu {:?}",
                        tr.j_values.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
                        tr.mu_values.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
                    );
                }
                if let Some(tr) = traces.last() {
                    eprintln!(
                        "    inner[last]: J {:?} mu {:?}",
                        tr.j_values.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
                        tr.mu_values.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
                    );
                }
            }
            rows.push((method.name().to_string(), mses));
        }
        table.push((seed, rows));
    }
    // Ordering summary.
    let mut dd_wins = 0;
    let mut dml_wins = 0;
    for (seed, rows) in &table {
        let mean = |name: &str| {
            rows.iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.iter().sum::<f64>() / m.len() as f64)
                .unwrap()
        };
        let (ml, dml, ddro) = (mean("ml"), mean("dml"), mean("ddro"));
        let ok1 = ddro < dml && dml < ml;
        if ok1 {
            dd_wins += 1;
        }
        if dml < ml {
            dml_wins += 1;
        }
        println!(
            "seed {seed}: ml {ml:.5} dml {dml:.5} ddro {ddro:.5} wdro {:.5} kldro {:.5} ordering {}",
            mean("wdro"),
            mean("kldro"),
            if ok1 { "OK" } else { "X" }
        );
    }
    println!("ordering holds {dd_wins}/{}; dml<ml {dml_wins}/{}", table.len(), table.len());
}
