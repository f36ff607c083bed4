//! End-to-end experiment execution, result bundles and report emission.
//!
//! A bundle directory holds: the canonical config, a metadata file with
//! the config hash and seed, the metric table, traces, probe reports and
//! final predictor weights. Every file except `timestamps.json` is a pure
//! function of `(config, seed)`, so re-running a config reproduces the
//! bundle byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::train_baseline;
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::noise::{apply_noise, NoiseSpec};
use crate::data::{write_series_csv, DataError, SequenceDataset, Series};
use crate::diffusion::{draw_dsm_batch, dsm_loss_node, NoiseSchedule, ScoreModel};
use crate::inner_max::InnerTrace;
use crate::metrics::{
    convergence_probe, gaussian_kl, lemma1_probe, mse_eval, spearman, wasserstein1,
    AnalyticGaussianPredictor, Estimate, ProbeReport,
};
use crate::predictor::DecisionModel;
use crate::rng::{derived_seed, substream};
use crate::scalar::Real;
use crate::tensor::{AdamState, Graph, Tensor, TensorError};
use crate::trainer::{prepare, RunResult, Scalar, TrainError, TrainSetup};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One evaluation row: method × dataset × perturbation → MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub dataset: String,
    pub noise_kind: String,
    pub level: f64,
    pub mse: f64,
}

/// Per-method traces kept in the bundle (parameter snapshots stay out).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceBundle {
    pub outer_losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub inner_traces: Vec<InnerTrace<f64>>,
    pub epsilon_used: f64,
    pub reference_loss: f64,
    pub selected_w_index: Option<usize>,
    pub selected_theta_indices: Vec<usize>,
    pub dataset_seeds: Vec<u64>,
}

impl TraceBundle {
    fn from_result(r: &RunResult) -> Self {
        Self {
            outer_losses: r.outer_losses.clone(),
            grad_norms: r.grad_norms.clone(),
            inner_traces: r.inner_traces.clone(),
            epsilon_used: r.epsilon_used,
            reference_loss: r.reference_loss,
            selected_w_index: r.selected_w_index,
            selected_theta_indices: r.selected_theta_indices.clone(),
            dataset_seeds: r.dataset_seeds.clone(),
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultBundle {
    pub config_hash: String,
    pub benchmark_id: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub metrics: Vec<MetricRow>,
    pub traces: BTreeMap<String, TraceBundle>,
    pub probes: BTreeMap<String, ProbeReport>,
    pub weights: BTreeMap<String, DecisionModel<Scalar>>,
    /// Wasserstein-1 distance between the training values and each test
    /// set's values, the dataset-shift report.
    pub shift_distances: Vec<(String, f64)>,
}

/// Execute the configured method(s) end to end: shared pretraining
/// preamble, training, evaluation over all test sets and noise levels.
pub fn run(cfg: &ExperimentConfig) -> Result<ResultBundle, HarnessError> {
    cfg.validate()?;
    let setup = prepare(cfg)?;
    let mut bundle = ResultBundle {
        config_hash: cfg.hash(),
        benchmark_id: cfg.benchmark_id(),
        seed: cfg.seed,
        methods: Vec::new(),
        metrics: Vec::new(),
        traces: BTreeMap::new(),
        probes: BTreeMap::new(),
        weights: BTreeMap::new(),
        shift_distances: shift_distances(&setup),
    };
    for method in cfg.method.methods() {
        let result = train_baseline(method, cfg, &setup)?;
        let name = method.name().to_string();
        bundle.methods.push(name.clone());
        bundle
            .metrics
            .extend(evaluate_method(cfg, &setup, &result.final_predictor, &name)?);
        if let Ok(probe) = convergence_probe(&result) {
            bundle.probes.insert(format!("convergence_{name}"), probe);
        }
        bundle.traces.insert(name.clone(), TraceBundle::from_result(&result));
        bundle.weights.insert(name, result.final_predictor.clone());
    }
    Ok(bundle)
}

fn shift_distances(setup: &TrainSetup) -> Vec<(String, f64)> {
    setup
        .data
        .test_series
        .iter()
        .map(|(name, values)| {
            let d = wasserstein1(&setup.data.train_series, values).unwrap_or(f64::NAN);
            (name.clone(), d)
        })
        .collect()
}

/// Clean and perturbed MSE rows for one trained predictor.
fn evaluate_method(
    cfg: &ExperimentConfig,
    setup: &TrainSetup,
    w: &DecisionModel<Scalar>,
    method: &str,
) -> Result<Vec<MetricRow>, HarnessError> {
    let mut rows = Vec::new();
    for (dataset, test) in &setup.data.tests {
        rows.push(MetricRow {
            method: method.to_string(),
            dataset: dataset.clone(),
            noise_kind: "none".into(),
            level: 0.0,
            mse: mse_eval(w, test)?,
        });
        for entry in &cfg.noise.battery {
            let levels = if entry.levels.is_empty() {
                vec![entry.spec.level()]
            } else {
                entry.levels.clone()
            };
            for level in levels {
                let spec = entry.spec.with_level(level);
                let noisy = apply_noise(test, &spec, noise_seed(cfg, dataset, &spec))?;
                rows.push(MetricRow {
                    method: method.to_string(),
                    dataset: dataset.clone(),
                    noise_kind: spec.kind_name().into(),
                    level,
                    mse: mse_eval(w, &noisy)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Noise draws depend on the noise seed, the dataset and the spec, not on
/// the method, so every method sees identical perturbed test sets.
fn noise_seed(cfg: &ExperimentConfig, dataset: &str, spec: &NoiseSpec) -> u64 {
    let mut salt: u64 = 0;
    for b in dataset.bytes() {
        salt = salt.wrapping_mul(131).wrapping_add(b as u64);
    }
    for b in format!("{spec:?}").bytes() {
        salt = salt.wrapping_mul(131).wrapping_add(b as u64);
    }
    derived_seed(cfg.noise.seed, salt)
}

// ---- persistence ------------------------------------------------------

/// Write the bundle under `dir`. Timestamps live in their own file so the
/// rest of the bundle is byte-identical across reruns.
pub fn persist(
    bundle: &ResultBundle,
    cfg: &ExperimentConfig,
    dir: &Path,
    started: &str,
    finished: &str,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    let meta = serde_json::json!({
        "config_hash": bundle.config_hash,
        "benchmark_id": bundle.benchmark_id,
        "seed": bundle.seed,
        "methods": bundle.methods,
    });
    write_file(&dir.join("meta.json"), &pretty_json(&meta))?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&bundle.metrics))?;
    write_file(
        &dir.join("traces.json"),
        &pretty_json(&serde_json::to_value(&bundle.traces).expect("traces serialize")),
    )?;
    write_file(
        &dir.join("probes.json"),
        &pretty_json(&serde_json::to_value(&bundle.probes).expect("probes serialize")),
    )?;
    write_file(
        &dir.join("weights.json"),
        &pretty_json(&serde_json::to_value(&bundle.weights).expect("weights serialize")),
    )?;
    write_file(
        &dir.join("shift.csv"),
        &shift_csv(&bundle.shift_distances),
    )?;
    let stamps = serde_json::json!({ "started": started, "finished": finished });
    write_file(&dir.join("timestamps.json"), &pretty_json(&stamps))?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(ExperimentConfig, ResultBundle), HarnessError> {
    let cfg = ExperimentConfig::from_path(&dir.join("config.toml"))?;
    let metrics = parse_metrics_csv(&read_file(&dir.join("metrics.csv"))?)?;
    let traces: BTreeMap<String, TraceBundle> =
        serde_json::from_str(&read_file(&dir.join("traces.json"))?)
            .map_err(|e| HarnessError::Invalid(format!("traces.json: {e}")))?;
    let probes: BTreeMap<String, ProbeReport> =
        serde_json::from_str(&read_file(&dir.join("probes.json"))?)
            .map_err(|e| HarnessError::Invalid(format!("probes.json: {e}")))?;
    let weights: BTreeMap<String, DecisionModel<Scalar>> =
        serde_json::from_str(&read_file(&dir.join("weights.json"))?)
            .map_err(|e| HarnessError::Invalid(format!("weights.json: {e}")))?;
    let meta: serde_json::Value = serde_json::from_str(&read_file(&dir.join("meta.json"))?)
        .map_err(|e| HarnessError::Invalid(format!("meta.json: {e}")))?;
    let bundle = ResultBundle {
        config_hash: meta["config_hash"].as_str().unwrap_or_default().to_string(),
        benchmark_id: meta["benchmark_id"].as_str().unwrap_or_default().to_string(),
        seed: meta["seed"].as_u64().unwrap_or_default(),
        methods: meta["methods"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default(),
        metrics,
        traces,
        probes,
        weights,
        shift_distances: Vec::new(),
    };
    Ok((cfg, bundle))
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn pretty_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("method,dataset,noise_kind,level,mse\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.method, r.dataset, r.noise_kind, r.level, r.mse
        );
    }
    out
}

fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>, HarnessError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(HarnessError::Invalid(format!(
                "metrics.csv line {}: expected 5 columns",
                i + 1
            )));
        }
        rows.push(MetricRow {
            method: parts[0].to_string(),
            dataset: parts[1].to_string(),
            noise_kind: parts[2].to_string(),
            level: parts[3]
                .parse()
                .map_err(|e| HarnessError::Invalid(format!("metrics.csv line {}: {e}", i + 1)))?,
            mse: parts[4]
                .parse()
                .map_err(|e| HarnessError::Invalid(format!("metrics.csv line {}: {e}", i + 1)))?,
        });
    }
    Ok(rows)
}

fn shift_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("dataset,wasserstein1\n");
    for (name, d) in rows {
        let _ = writeln!(out, "{name},{d}");
    }
    out
}

// ---- reporting --------------------------------------------------------

/// Aggregated report over one or more bundles sharing a benchmark
/// identity: a method × dataset MSE table with percent improvement over
/// the plain baseline, per-noise-kind level curves, and budget-sweep
/// columns when the bundles differ in ε.
pub struct Report {
    pub table: String,
    pub noise_curves: String,
    pub epsilon_curve: String,
}

pub fn report(bundles: &[(ExperimentConfig, ResultBundle)]) -> Result<Report, HarnessError> {
    if bundles.is_empty() {
        return Err(HarnessError::Invalid("no bundles given".into()));
    }
    let id = &bundles[0].1.benchmark_id;
    if let Some((_, other)) = bundles.iter().find(|(_, b)| &b.benchmark_id != id) {
        return Err(HarnessError::Invalid(format!(
            "bundles mix benchmarks {id} and {}",
            other.benchmark_id
        )));
    }

    // method × dataset means over bundles (clean rows only).
    let mut by_cell: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut datasets: Vec<String> = Vec::new();
    for (_, b) in bundles {
        for r in b.metrics.iter().filter(|r| r.noise_kind == "none") {
            if !datasets.contains(&r.dataset) {
                datasets.push(r.dataset.clone());
            }
            by_cell
                .entry((r.method.clone(), r.dataset.clone()))
                .or_default()
                .push(r.mse);
        }
    }
    let methods: Vec<String> = {
        let mut m: Vec<String> = by_cell.keys().map(|(m, _)| m.clone()).collect();
        m.dedup();
        m.sort();
        m.dedup();
        m
    };
    let mean_of = |method: &str, dataset: &str| -> Option<f64> {
        by_cell
            .get(&(method.to_string(), dataset.to_string()))
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let overall: BTreeMap<String, f64> = methods
        .iter()
        .filter_map(|m| {
            let vals: Vec<f64> = datasets.iter().filter_map(|d| mean_of(m, d)).collect();
            (!vals.is_empty()).then(|| (m.clone(), vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    let ml_overall = overall.get("ml").copied();

    let mut table = String::from("method,dataset,mse,improvement_over_ml_pct\n");
    for m in &methods {
        for d in &datasets {
            if let Some(v) = mean_of(m, d) {
                let imp = mean_of("ml", d)
                    .filter(|ml| *ml > 0.0 && m != "ml")
                    .map(|ml| format!("{}", (1.0 - v / ml) * 100.0))
                    .unwrap_or_default();
                let _ = writeln!(table, "{m},{d},{v},{imp}");
            }
        }
        if let Some(v) = overall.get(m) {
            let imp = ml_overall
                .filter(|ml| *ml > 0.0 && m != "ml")
                .map(|ml| format!("{}", (1.0 - v / ml) * 100.0))
                .unwrap_or_default();
            let _ = writeln!(table, "{m},mean,{v},{imp}");
        }
    }

    // noise kind × level × method means over bundles and datasets.
    let mut by_noise: BTreeMap<(String, String, u64), Vec<f64>> = BTreeMap::new();
    for (_, b) in bundles {
        for r in b.metrics.iter().filter(|r| r.noise_kind != "none") {
            by_noise
                .entry((r.noise_kind.clone(), r.method.clone(), r.level.to_bits()))
                .or_default()
                .push(r.mse);
        }
    }
    let mut noise_curves = String::from("noise_kind,level,method,mse\n");
    for ((kind, method, level_bits), vals) in &by_noise {
        let level = f64::from_bits(*level_bits);
        let mse = vals.iter().sum::<f64>() / vals.len() as f64;
        let _ = writeln!(noise_curves, "{kind},{level},{method},{mse}");
    }

    // ε sweep: mean clean test loss of the adversarial method per budget.
    let mut by_eps: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (cfg, b) in bundles {
        let clean: Vec<f64> = b
            .metrics
            .iter()
            .filter(|r| r.noise_kind == "none" && r.method == "ddro")
            .map(|r| r.mse)
            .collect();
        if !clean.is_empty() {
            by_eps
                .entry(cfg.inner.epsilon.to_bits())
                .or_default()
                .push(clean.iter().sum::<f64>() / clean.len() as f64);
        }
    }
    let mut epsilon_curve = String::from("epsilon,mean_mse,bundles\n");
    for (bits, vals) in &by_eps {
        let eps = f64::from_bits(*bits);
        let mse = vals.iter().sum::<f64>() / vals.len() as f64;
        let _ = writeln!(epsilon_curve, "{eps},{mse},{}", vals.len());
    }

    Ok(Report {
        table,
        noise_curves,
        epsilon_curve,
    })
}

pub fn write_report(report: &Report, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("table.csv"), &report.table)?;
    write_file(&dir.join("noise_curves.csv"), &report.noise_curves)?;
    write_file(&dir.join("epsilon_curve.csv"), &report.epsilon_curve)?;
    Ok(())
}

// ---- verification probes ---------------------------------------------

/// Analytic-score probe plus a checkpointed training probe on the 1-d
/// Gaussian configured under `[verify]`.
pub fn verify_probes(cfg: &ExperimentConfig) -> Result<BTreeMap<String, ProbeReport>, HarnessError> {
    let mut out = BTreeMap::new();
    let d = &cfg.diffusion;
    // Pure-DDPM schedule (posterior σ everywhere) for the probes.
    let sched = NoiseSchedule::linear(d.steps, d.beta_min, d.beta_max, 0.0, 0)?;
    let step_set: Vec<usize> = (1..=d.finetune_steps).collect();
    let (m0, v0) = (cfg.verify.gaussian_mean, cfg.verify.gaussian_var);
    let analytic = AnalyticGaussianPredictor {
        m0,
        v0,
        sched: sched.clone(),
    };
    let probe = lemma1_probe(
        &analytic,
        &sched,
        m0,
        v0,
        &step_set,
        4000,
        cfg.verify.probe_samples,
        &mut substream(cfg.seed, 9000),
    )?;
    out.insert("lemma1_analytic".into(), probe);

    let (dsm_trace, kl_trace) = gaussian_checkpoint_trace(cfg, &sched, cfg.verify.checkpoints)?;
    let rho = spearman(&dsm_trace, &kl_trace);
    let mut tr = ProbeReport::default();
    for (i, (dsm, kl)) in dsm_trace.iter().zip(&kl_trace).enumerate() {
        tr.estimates.insert(
            format!("checkpoint_{i}_dsm"),
            Estimate::exact(*dsm),
        );
        tr.estimates.insert(format!("checkpoint_{i}_kl"), Estimate::exact(*kl));
    }
    tr.estimates.insert("spearman".into(), Estimate::exact(rho));
    tr.flags.insert("dsm_kl_rank_correlated".into(), rho > 0.0);
    out.insert("lemma1_training_trace".into(), tr);
    Ok(out)
}

/// Train a small noise predictor on 1-d Gaussian data, recording the
/// denoising loss and the reverse-KL moment fit at evenly spaced
/// checkpoints (including the untrained model).
pub fn gaussian_checkpoint_trace(
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule<Scalar>,
    checkpoints: usize,
) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    let (m0, v0) = (cfg.verify.gaussian_mean, cfg.verify.gaussian_var);
    let seed = cfg.seed;
    let mut rng = substream(seed, 9100);
    let n = 512;
    let data: Vec<f64> = (0..n)
        .map(|_| m0 + v0.sqrt() * f64::standard_normal(&mut rng))
        .collect();
    let x0 = Tensor::from_parts_unchecked(vec![n, 1], data);
    let mut model = ScoreModel::new(1, &[24, 24], 8, derived_seed(seed, 9101))?;
    let mut adam = AdamState::new(model.params(), 2e-3);
    let full_steps: Vec<usize> = (1..=sched.steps).collect();
    let step_set: Vec<usize> = (1..=cfg.diffusion.finetune_steps.min(sched.steps)).collect();

    let steps_per_checkpoint = 120;
    let mut dsm_trace = Vec::with_capacity(checkpoints);
    let mut kl_trace = Vec::with_capacity(checkpoints);
    for ck in 0..checkpoints {
        if ck > 0 {
            for _ in 0..steps_per_checkpoint {
                let idx: Vec<usize> = (0..64).map(|_| rng.gen_range(0..n)).collect();
                let rows = {
                    let mut data = Vec::with_capacity(64);
                    for &i in &idx {
                        data.push(x0.data()[i]);
                    }
                    Tensor::from_parts_unchecked(vec![64, 1], data)
                };
                let dsm = draw_dsm_batch(&model, &rows, sched, &full_steps, &mut rng)?;
                let mut g = Graph::new();
                let params = model.declare_params(&mut g, "sm")?;
                let (loss, feeds) = dsm_loss_node(&mut g, &model, &params, &dsm, "dsm")?;
                let mut bindings: crate::tensor::Bindings<'_, Scalar> = Default::default();
                for (name, t) in &feeds {
                    bindings.insert(name.clone(), t);
                }
                model.bind_params("sm", &mut bindings);
                let eval = g.forward(&bindings)?;
                let grads = g.backward(&eval, loss)?;
                let grad_list = model
                    .param_names("sm")
                    .iter()
                    .map(|name| g.grad_of_input(&grads, name))
                    .collect::<Result<Vec<_>, _>>()?;
                adam.apply(model.params_mut(), &grad_list)?;
            }
        }
        let dsm = crate::diffusion::dsm_loss(
            &model,
            &x0,
            sched,
            &step_set,
            &mut substream(seed, 9200),
        )?;
        let out = crate::diffusion::reverse_sample(
            &model,
            sched,
            cfg.verify.probe_samples,
            &mut substream(seed, 9300),
            false,
        )?;
        let nf = out.samples.len() as f64;
        let mean: f64 = out.samples.data().iter().sum::<f64>() / nf;
        let var: f64 = out
            .samples
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (nf - 1.0);
        let kl = gaussian_kl(m0, v0, mean, var.max(1e-12))?;
        dsm_trace.push(dsm);
        kl_trace.push(kl);
    }
    Ok((dsm_trace, kl_trace))
}

// ---- dataset emission (synth / perturb subcommands) --------------------

/// Write the configured synthetic series as CSV files.
pub fn emit_synthetic(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    if let Some(spec) = &cfg.data.synthetic {
        let s: Series<Scalar> =
            crate::data::synth_generate(spec, derived_seed(cfg.seed, crate::rng::stream::SYNTH_BASE))?;
        let path = dir.join("train.csv");
        write_series_csv(&path, &s)?;
        written.push(path);
    }
    for (i, t) in cfg.data.synthetic_tests.iter().enumerate() {
        let s: Series<Scalar> = crate::data::synth_generate(
            &t.spec,
            derived_seed(cfg.seed, crate::rng::stream::SYNTH_BASE + 1 + i as u64),
        )?;
        let path = dir.join(format!("test_{}.csv", t.name));
        write_series_csv(&path, &s)?;
        written.push(path);
    }
    Ok(written)
}

/// Write perturbed test datasets as plain columnar CSVs (window columns
/// then horizon columns).
pub fn emit_perturbed(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let data = crate::trainer::prepare_data(cfg)?;
    let mut written = Vec::new();
    for (name, test) in &data.tests {
        for entry in &cfg.noise.battery {
            let levels = if entry.levels.is_empty() {
                vec![entry.spec.level()]
            } else {
                entry.levels.clone()
            };
            for level in levels {
                let spec = entry.spec.with_level(level);
                let noisy = apply_noise(test, &spec, noise_seed(cfg, name, &spec))?;
                let path = dir.join(format!("{name}_{}_{level}.csv", spec.kind_name()));
                write_file(&path, &dataset_csv(&noisy))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn dataset_csv(ds: &SequenceDataset<Scalar>) -> String {
    let (l_in, l_out) = (ds.window_len(), ds.horizon_len());
    let mut header: Vec<String> = (0..l_in).map(|i| format!("w{i}")).collect();
    header.extend((0..l_out).map(|i| format!("h{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..ds.len() {
        let mut fields: Vec<String> =
            ds.windows().row(i).iter().map(|v| format!("{v}")).collect();
        fields.extend(ds.horizons().row(i).iter().map(|v| format!("{v}")));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Evaluate stored predictor weights against the config's datasets and
/// noise battery (the `eval` subcommand).
pub fn evaluate_bundle(
    cfg: &ExperimentConfig,
    bundle: &ResultBundle,
) -> Result<Vec<MetricRow>, HarnessError> {
    let setup_data = crate::trainer::prepare_data(cfg)?;
    let mut rows = Vec::new();
    for (method, w) in &bundle.weights {
        for (dataset, test) in &setup_data.tests {
            rows.push(MetricRow {
                method: method.clone(),
                dataset: dataset.clone(),
                noise_kind: "none".into(),
                level: 0.0,
                mse: mse_eval(w, test)?,
            });
            for entry in &cfg.noise.battery {
                let levels = if entry.levels.is_empty() {
                    vec![entry.spec.level()]
                } else {
                    entry.levels.clone()
                };
                for level in levels {
                    let spec = entry.spec.with_level(level);
                    let noisy = apply_noise(test, &spec, noise_seed(cfg, dataset, &spec))?;
                    rows.push(MetricRow {
                        method: method.clone(),
                        dataset: dataset.clone(),
                        noise_kind: spec.kind_name().into(),
                        level,
                        mse: mse_eval(w, &noisy)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn metrics_csv_text(rows: &[MetricRow]) -> String {
    metrics_csv(rows)
}

/// Convergence diagnostics from a persisted trace bundle.
pub fn trace_probe(tb: &TraceBundle) -> Result<ProbeReport, HarnessError> {
    Ok(crate::metrics::trace_diagnostics(&tb.inner_traces, &tb.grad_norms)?)
}

pub fn probes_json(probes: &BTreeMap<String, ProbeReport>) -> String {
    pretty_json(&serde_json::to_value(probes).expect("probes serialize"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MethodSelect;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.method = MethodSelect::All;
        cfg.predictor.window = 6;
        cfg.predictor.horizon = 1;
        cfg.predictor.hidden = vec![6];
        cfg.predictor.pretrain_epochs = 2;
        cfg.diffusion.steps = 8;
        cfg.diffusion.finetune_steps = 3;
        cfg.diffusion.hidden = vec![10];
        cfg.diffusion.embed_dim = 4;
        cfg.diffusion.pretrain_epochs = 2;
        cfg.inner.iterations = 1;
        cfg.inner.traj_batch = 4;
        cfg.outer.iterations = 1;
        cfg.outer.dataset_size = 8;
        cfg.outer.epochs_per_dataset = 1;
        cfg.wdro.epochs = 1;
        cfg.kldro.epochs = 1;
        if let Some(s) = cfg.data.synthetic.as_mut() {
            s.length = 60;
        }
        cfg.data.synthetic_tests.truncate(1);
        if let Some(t) = cfg.data.synthetic_tests.first_mut() {
            t.spec.length = 40;
        }
        for entry in cfg.noise.battery.iter_mut() {
            entry.levels.truncate(1);
        }
        cfg
    }

    #[test]
    fn run_produces_rows_for_every_method_and_persists_reproducibly() {
        let cfg = tiny_cfg();
        let bundle = run(&cfg).unwrap();
        assert_eq!(bundle.methods.len(), 5);
        for m in ["ml", "dml", "ddro", "wdro", "kldro"] {
            assert!(
                bundle.metrics.iter().any(|r| r.method == m),
                "missing rows for {m}"
            );
            assert!(bundle.weights.contains_key(m));
        }
        // Clean + 3 noise kinds × 1 level each, 1 test set, 5 methods.
        assert_eq!(bundle.metrics.len(), 5 * (1 + 3));

        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        persist(&bundle, &cfg, &d1, "t0", "t1").unwrap();
        let bundle2 = run(&cfg).unwrap();
        persist(&bundle2, &cfg, &d2, "t5", "t9").unwrap();
        for f in ["config.toml", "metrics.csv", "traces.json", "weights.json", "meta.json"] {
            let a = std::fs::read(d1.join(f)).unwrap();
            let b = std::fs::read(d2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
        let (_, loaded) = load_bundle(&d1).unwrap();
        assert_eq!(loaded.metrics, bundle.metrics);
    }

    #[test]
    fn report_improvement_arithmetic() {
        // Two bundles with ML at 2.0 and the adversarial method at 1.0
        // give a 50% improvement row.
        let cfg = tiny_cfg();
        let mk = |method: &str, mse: f64| MetricRow {
            method: method.into(),
            dataset: "d".into(),
            noise_kind: "none".into(),
            level: 0.0,
            mse,
        };
        let bundle = ResultBundle {
            config_hash: "h".into(),
            benchmark_id: cfg.benchmark_id(),
            seed: 0,
            methods: vec!["ml".into(), "ddro".into()],
            metrics: vec![mk("ml", 2.0), mk("ddro", 1.0)],
            traces: BTreeMap::new(),
            probes: BTreeMap::new(),
            weights: BTreeMap::new(),
            shift_distances: vec![],
        };
        let rep = report(&[(cfg, bundle)]).unwrap();
        let line = rep
            .table
            .lines()
            .find(|l| l.starts_with("ddro,mean"))
            .unwrap();
        assert_eq!(line, "ddro,mean,1,50");
    }

    #[test]
    fn report_single_method_leaves_improvement_empty() {
        let cfg = tiny_cfg();
        let bundle = ResultBundle {
            config_hash: "h".into(),
            benchmark_id: cfg.benchmark_id(),
            seed: 0,
            methods: vec!["ddro".into()],
            metrics: vec![MetricRow {
                method: "ddro".into(),
                dataset: "d".into(),
                noise_kind: "none".into(),
                level: 0.0,
                mse: 1.5,
            }],
            traces: BTreeMap::new(),
            probes: BTreeMap::new(),
            weights: BTreeMap::new(),
            shift_distances: vec![],
        };
        let rep = report(&[(cfg, bundle)]).unwrap();
        assert!(rep.table.contains("ddro,d,1.5,\n"));
    }

    #[test]
    fn report_rejects_mixed_benchmarks() {
        let cfg1 = tiny_cfg();
        let mut cfg2 = tiny_cfg();
        cfg2.predictor.window = 5;
        let empty = |cfg: &ExperimentConfig| ResultBundle {
            config_hash: "h".into(),
            benchmark_id: cfg.benchmark_id(),
            seed: 0,
            methods: vec![],
            metrics: vec![],
            traces: BTreeMap::new(),
            probes: BTreeMap::new(),
            weights: BTreeMap::new(),
            shift_distances: vec![],
        };
        let b1 = empty(&cfg1);
        let b2 = empty(&cfg2);
        assert!(report(&[(cfg1, b1), (cfg2, b2)]).is_err());
    }

    #[test]
    fn synth_emission_writes_all_series() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        for f in files {
            assert!(f.exists());
        }
    }
}
