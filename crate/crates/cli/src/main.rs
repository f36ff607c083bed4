//! Command-line front end: dataset synthesis, training runs, perturbed
//! test-set emission, evaluation, verification probes and report tables.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ddro_core::config::ExperimentConfig;
use ddro_core::harness;

#[derive(Parser)]
#[command(
    name = "ddro",
    about = "Distributionally robust optimization with diffusion-model ambiguity sets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic datasets as CSV files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `<out_dir>/datasets`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute the configured method(s) end to end and persist the bundle.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Emit noisy test sets for the configured perturbation battery.
    Perturb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a persisted bundle's predictors on the configured data.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Bundle directory holding weights.json.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the analytic-Gaussian verification probes (and trace
    /// diagnostics when a bundle is given).
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Aggregate bundles into report tables and plot-ready columns.
    Report {
        /// Bundle directories.
        bundles: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn now() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_else(|_| "unknown".into())
}

fn dispatch(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Synth { config, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let dir = out.unwrap_or_else(|| cfg.resolved_out_dir().join("datasets"));
            let files = harness::emit_synthetic(&cfg, &dir)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let started = now();
            let bundle = harness::run(&cfg)?;
            let finished = now();
            let dir = cfg.resolved_out_dir();
            harness::persist(&bundle, &cfg, &dir, &started, &finished)?;
            println!("bundle written to {}", dir.display());
            for row in bundle.metrics.iter().filter(|r| r.noise_kind == "none") {
                println!("{:>6}  {:<14} mse {:.6}", row.method, row.dataset, row.mse);
            }
            Ok(())
        }
        Command::Perturb { config, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let dir = out.unwrap_or_else(|| cfg.resolved_out_dir().join("perturbed"));
            let files = harness::emit_perturbed(&cfg, &dir)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Eval {
            config,
            bundle,
            out,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let (_, loaded) = harness::load_bundle(&bundle)?;
            let rows = harness::evaluate_bundle(&cfg, &loaded)?;
            let text = harness::metrics_csv_text(&rows);
            match out {
                Some(path) => {
                    std::fs::create_dir_all(&path)?;
                    std::fs::write(path.join("metrics.csv"), &text)?;
                    println!("wrote {}", path.join("metrics.csv").display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Verify { config, bundle } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let mut probes = harness::verify_probes(&cfg)?;
            if let Some(dir) = bundle {
                let (_, loaded) = harness::load_bundle(&dir)?;
                for (method, tb) in &loaded.traces {
                    if let Ok(p) = harness::trace_probe(tb) {
                        probes.insert(format!("convergence_{method}"), p);
                    }
                }
            }
            for (name, probe) in &probes {
                println!("[{name}]");
                for (key, est) in &probe.estimates {
                    println!(
                        "  {key}: {:.6} (n={}, se={:.2e})",
                        est.value, est.samples, est.std_error
                    );
                }
                for (key, slope) in &probe.slopes {
                    println!("  slope {key}: {slope:.3e}");
                }
                for (key, flag) in &probe.flags {
                    println!("  {} {key}", if *flag { "PASS" } else { "FAIL" });
                }
            }
            let dir = cfg.resolved_out_dir();
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("probes.json"), harness::probes_json(&probes))?;
            println!("probes written to {}", dir.join("probes.json").display());
            Ok(())
        }
        Command::Report { bundles, out } => {
            if bundles.is_empty() {
                return Err("report needs at least one bundle directory".into());
            }
            let loaded = bundles
                .iter()
                .map(|d| harness::load_bundle(d))
                .collect::<Result<Vec<_>, _>>()?;
            let rep = harness::report(&loaded)?;
            harness::write_report(&rep, &out)?;
            println!("report written to {}", out.display());
            print!("{}", rep.table);
            Ok(())
        }
    }
}

