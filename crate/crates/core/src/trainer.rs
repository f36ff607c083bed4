//! Outer training loop: gradient descent with a diffusion max-oracle.
//!
//! Each outer iteration runs the inner maximization, uniformly selects one
//! diffusion iterate, generates an adversarial dataset from it, and takes
//! predictor epochs on that dataset. Uniform selections (of θ per
//! iteration and of the returned decision variable) draw from the run's
//! seeded generator only.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ArchChoice, ExperimentConfig, Method, OptimizerChoice, SurrogateChoice,
};
use crate::data::{
    read_series_csv, synth_generate, windowize, DataError, MinMaxTransform, SequenceDataset,
    Series,
};
use crate::diffusion::{
    draw_dsm_batch, dsm_loss_node, reverse_sample, FrozenDsmTargets,
    NoiseSchedule, ScoreModel,
};
use crate::inner_max::{
    inner_max_run, DualState, InnerMaxError, InnerMaxRng, InnerTrace, PpoConfig, SurrogateKind,
};
use crate::predictor::{DecisionModel, PredictionProblem, PredictorArch};
use crate::rng::{derived_seed, stream, substream, RunRng};
use crate::scalar::kahan_sum;
use crate::tensor::{AdamState, Graph, Tensor, TensorError};

pub type Scalar = f64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Inner(#[from] InnerMaxError),
    #[error("{0}")]
    Invalid(String),
}

/// Normalized training data plus the shifted test sets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SequenceDataset<Scalar>,
    pub tests: Vec<(String, SequenceDataset<Scalar>)>,
    pub transform: Option<MinMaxTransform>,
    /// Raw (post-transform) series values per split, for shift metrics.
    pub train_series: Vec<Scalar>,
    pub test_series: Vec<(String, Vec<Scalar>)>,
}

/// Build train/test datasets per the config's data block.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, TrainError> {
    let (l_in, l_out, stride) = (cfg.predictor.window, cfg.predictor.horizon, cfg.data.stride);
    let (train_series, test_series): (Series<Scalar>, Vec<(String, Series<Scalar>)>) =
        match cfg.data.source {
            crate::config::DataSource::Synthetic => {
                let spec = cfg
                    .data
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| TrainError::Invalid("missing synthetic spec".into()))?;
                let train = synth_generate(spec, derived_seed(cfg.seed, stream::SYNTH_BASE))?;
                let tests = cfg
                    .data
                    .synthetic_tests
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let seed = derived_seed(cfg.seed, stream::SYNTH_BASE + 1 + i as u64);
                        Ok((t.name.clone(), synth_generate(&t.spec, seed)?))
                    })
                    .collect::<Result<Vec<_>, DataError>>()?;
                (train, tests)
            }
            crate::config::DataSource::Csv => {
                let path = cfg
                    .data
                    .train_csv
                    .as_ref()
                    .ok_or_else(|| TrainError::Invalid("missing train csv".into()))?;
                let train = read_series_csv(std::path::Path::new(path))?;
                let tests = cfg
                    .data
                    .test_csvs
                    .iter()
                    .map(|t| {
                        Ok((
                            t.name.clone(),
                            read_series_csv(std::path::Path::new(&t.path))?,
                        ))
                    })
                    .collect::<Result<Vec<_>, DataError>>()?;
                (train, tests)
            }
        };

    let transform = cfg.data.normalize.then(|| MinMaxTransform::fit(&train_series));
    let scale = |s: &Series<Scalar>| match &transform {
        Some(tr) => tr.apply(s),
        None => s.clone(),
    };
    let train_scaled = scale(&train_series);
    let train = SequenceDataset::from_samples(&windowize(&train_scaled, l_in, l_out, stride)?)?;
    let mut tests = Vec::with_capacity(test_series.len());
    let mut test_values = Vec::with_capacity(test_series.len());
    for (name, s) in &test_series {
        let scaled = scale(s);
        tests.push((
            name.clone(),
            SequenceDataset::from_samples(&windowize(&scaled, l_in, l_out, stride)?)?,
        ));
        test_values.push((name.clone(), scaled.values().to_vec()));
    }
    Ok(PreparedData {
        train,
        tests,
        transform,
        train_series: train_scaled.values().to_vec(),
        test_series: test_values,
    })
}

/// Shared preamble: data, schedule, pretrained diffusion reference and
/// pretrained predictor, plus the resolved adversarial budget.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub data: PreparedData,
    pub sched: NoiseSchedule<Scalar>,
    pub reference: ScoreModel<Scalar>,
    pub pretrained: DecisionModel<Scalar>,
    pub eval_targets: FrozenDsmTargets<Scalar>,
    pub reference_loss: Scalar,
    pub epsilon: Scalar,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<TrainSetup, TrainError> {
    let data = prepare_data(cfg)?;
    let d = &cfg.diffusion;
    let sched = NoiseSchedule::linear(d.steps, d.beta_min, d.beta_max, d.sigma, d.finetune_steps)?;
    let reference = pretrain_diffusion(cfg, &data.train, &sched)?;
    let pretrained = pretrain_predictor(cfg, &data.train)?;
    let step_set: Vec<usize> = (1..=d.finetune_steps).collect();
    let eval_targets = FrozenDsmTargets::draw(
        &reference,
        &data.train.joined(),
        &sched,
        &step_set,
        &mut substream(cfg.seed, stream::CONSTRAINT_EVAL),
    )?;
    let reference_loss = eval_targets.loss(&reference)?;
    let epsilon = if cfg.inner.epsilon_relative {
        cfg.inner.epsilon * reference_loss
    } else {
        cfg.inner.epsilon
    };
    Ok(TrainSetup {
        data,
        sched,
        reference,
        pretrained,
        eval_targets,
        reference_loss,
        epsilon,
    })
}

/// Standard denoising pretraining of the reference model over the full
/// step range.
pub fn pretrain_diffusion(
    cfg: &ExperimentConfig,
    train: &SequenceDataset<Scalar>,
    sched: &NoiseSchedule<Scalar>,
) -> Result<ScoreModel<Scalar>, TrainError> {
    let d = &cfg.diffusion;
    let dim = cfg.predictor.window + cfg.predictor.horizon;
    let mut model = ScoreModel::new(
        dim,
        &d.hidden,
        d.embed_dim,
        derived_seed(cfg.seed, stream::DIFFUSION_INIT),
    )?;
    let mut adam = AdamState::new(model.params(), d.pretrain_lr);
    let mut rng = substream(cfg.seed, stream::DIFFUSION_PRETRAIN);
    let x0 = train.joined();
    let full_steps: Vec<usize> = (1..=sched.steps).collect();
    let n = x0.rows();
    let batch = d.batch_size.min(n);
    for _epoch in 0..d.pretrain_epochs {
        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < batch {
                break;
            }
            let rows = gather_rows(&x0, chunk);
            let dsm = draw_dsm_batch(&model, &rows, sched, &full_steps, &mut rng)?;
            let mut g = Graph::new();
            let params = model.declare_params(&mut g, "sm")?;
            let (loss_node, feeds) = dsm_loss_node(&mut g, &model, &params, &dsm, "dsm")?;
            let mut bindings: crate::tensor::Bindings<'_, Scalar> = Default::default();
            for (name, t) in &feeds {
                bindings.insert(name.clone(), t);
            }
            model.bind_params("sm", &mut bindings);
            let eval = g.forward(&bindings)?;
            let grads = g.backward(&eval, loss_node)?;
            let grad_list = model
                .param_names("sm")
                .iter()
                .map(|name| g.grad_of_input(&grads, name))
                .collect::<Result<Vec<_>, _>>()?;
            adam.apply(model.params_mut(), &grad_list)?;
        }
    }
    Ok(model)
}

/// Mean-squared-error pretraining of the shared predictor.
pub fn pretrain_predictor(
    cfg: &ExperimentConfig,
    train: &SequenceDataset<Scalar>,
) -> Result<DecisionModel<Scalar>, TrainError> {
    let p = &cfg.predictor;
    let arch = match p.arch {
        ArchChoice::Mlp => PredictorArch::Mlp,
        ArchChoice::Recurrent => PredictorArch::Recurrent,
    };
    let mut model = DecisionModel::new(
        p.window,
        p.horizon,
        &p.hidden,
        arch,
        derived_seed(cfg.seed, stream::PREDICTOR_INIT),
    )?;
    let mut adam = AdamState::new(model.params(), p.pretrain_lr);
    let mut rng = substream(cfg.seed, stream::PREDICTOR_PRETRAIN);
    train_epochs(
        &mut model,
        &mut adam,
        train,
        p.pretrain_epochs,
        cfg.outer.batch_size,
        &mut rng,
    )?;
    Ok(model)
}

/// Minibatch Adam epochs on a fixed dataset.
fn train_epochs(
    model: &mut DecisionModel<Scalar>,
    adam: &mut AdamState<Scalar>,
    data: &SequenceDataset<Scalar>,
    epochs: usize,
    batch_size: usize,
    rng: &mut RunRng,
) -> Result<(), TrainError> {
    let n = data.len();
    let batch = batch_size.min(n);
    for _ in 0..epochs {
        let order = shuffled_indices(n, rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < batch {
                break;
            }
            let sub = data.subset(chunk);
            let problem = PredictionProblem::new(model, &sub)?;
            let (_, grads) = problem.loss_and_gradient(model.params())?;
            adam.apply(model.params_mut(), &grads)?;
        }
    }
    Ok(())
}

fn shuffled_indices(n: usize, rng: &mut RunRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn gather_rows(x: &Tensor<Scalar>, idx: &[usize]) -> Tensor<Scalar> {
    let cols = x.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::from_parts_unchecked(vec![idx.len(), cols], data)
}

/// Draw `n` reverse samples and split them into supervised sequence
/// samples.
pub fn sample_adversarial_dataset(
    model: &ScoreModel<Scalar>,
    sched: &NoiseSchedule<Scalar>,
    l_in: usize,
    l_out: usize,
    n: usize,
    rng: &mut RunRng,
) -> Result<SequenceDataset<Scalar>, TrainError> {
    let out = reverse_sample(model, sched, n, rng, false)?;
    Ok(SequenceDataset::from_generated(&out.samples, l_in, l_out)?)
}

/// One full-batch gradient step `w' = w - λ ∇_w mean f(w, S)`.
pub fn outer_step(
    w: &DecisionModel<Scalar>,
    s_j: &SequenceDataset<Scalar>,
    lambda: Scalar,
) -> Result<DecisionModel<Scalar>, TrainError> {
    if s_j.is_empty() {
        return Err(TrainError::Invalid("empty dataset".into()));
    }
    let problem = PredictionProblem::new(w, s_j)?;
    let (_, grads) = problem.loss_and_gradient(w.params())?;
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(TrainError::Invalid("non-finite outer gradient".into()));
    }
    let mut out = w.clone();
    for (p, g) in out.params_mut().iter_mut().zip(&grads) {
        p.add_scaled(g, -lambda);
    }
    Ok(out)
}

/// Full run record: per-iteration decision parameters, selected diffusion
/// iterates, traces, and the uniformly selected final predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub final_predictor: DecisionModel<Scalar>,
    pub final_diffusion: Option<ScoreModel<Scalar>>,
    pub predictor_iterates: Vec<Vec<Tensor<Scalar>>>,
    pub selected_diffusion: Vec<Vec<Tensor<Scalar>>>,
    pub selected_theta_indices: Vec<usize>,
    pub selected_w_index: Option<usize>,
    pub outer_losses: Vec<Scalar>,
    pub grad_norms: Vec<Scalar>,
    pub inner_traces: Vec<InnerTrace<Scalar>>,
    pub dataset_seeds: Vec<u64>,
    pub epsilon_used: Scalar,
    pub reference_loss: Scalar,
}

impl RunResult {
    fn empty(method: Method, w: DecisionModel<Scalar>, epsilon: Scalar, j_ref: Scalar) -> Self {
        Self {
            method,
            final_predictor: w,
            final_diffusion: None,
            predictor_iterates: Vec::new(),
            selected_diffusion: Vec::new(),
            selected_theta_indices: Vec::new(),
            selected_w_index: None,
            outer_losses: Vec::new(),
            grad_norms: Vec::new(),
            inner_traces: Vec::new(),
            dataset_seeds: Vec::new(),
            epsilon_used: epsilon,
            reference_loss: j_ref,
        }
    }
}

fn surrogate_kind(choice: SurrogateChoice) -> SurrogateKind {
    match choice {
        SurrogateChoice::Ppo => SurrogateKind::Ppo,
        SurrogateChoice::PolicyGradient => SurrogateKind::PolicyGradient,
    }
}

fn ppo_config(cfg: &ExperimentConfig) -> PpoConfig<Scalar> {
    PpoConfig {
        kappa: cfg.inner.kappa,
        finetune_steps: cfg.diffusion.finetune_steps,
        iterations: cfg.inner.iterations,
        surrogate: surrogate_kind(cfg.inner.surrogate),
        learning_rate: cfg.inner.learning_rate,
        batch: cfg.inner.traj_batch,
        use_baseline: cfg.inner.use_baseline,
        trace_f_samples: cfg.inner.trace_f_samples,
    }
}

/// End-to-end training of the adversarially robust configuration
/// (Algorithm: outer descent with an inner max-oracle). With
/// `outer.frozen_reference` the inner maximization is skipped, and with
/// `outer.resample_each_iter = false` the first generated dataset is
/// reused — together those degenerate to the diffusion-augmented
/// baseline.
pub fn ddro_train(cfg: &ExperimentConfig) -> Result<RunResult, TrainError> {
    let setup = prepare(cfg)?;
    ddro_train_with_setup(cfg, &setup)
}

pub fn ddro_train_with_setup(
    cfg: &ExperimentConfig,
    setup: &TrainSetup,
) -> Result<RunResult, TrainError> {
    run_gdmo(cfg, setup, Method::Ddro)
}

pub(crate) fn run_gdmo(
    cfg: &ExperimentConfig,
    setup: &TrainSetup,
    method: Method,
) -> Result<RunResult, TrainError> {
    let outer_iters = cfg.outer.iterations;
    let mut result = RunResult::empty(
        method,
        setup.pretrained.clone(),
        setup.epsilon,
        setup.reference_loss,
    );
    if outer_iters == 0 {
        return Ok(result);
    }

    let seed = cfg.seed;
    let s0 = setup.data.train.joined();
    let inner_cfg = ppo_config(cfg);
    let (l_in, l_out) = (cfg.predictor.window, cfg.predictor.horizon);
    let n_generate = cfg.outer.dataset_size;

    let mut w = setup.pretrained.clone();
    let mut theta = setup.reference.clone();
    let mut dual = DualState::new(cfg.inner.mu_init, cfg.inner.eta, setup.epsilon)?;
    let mut w_adam = AdamState::new(w.params(), cfg.outer.learning_rate);
    let mut rngs = InnerMaxRng {
        trajectories: substream(seed, stream::TRAJECTORIES),
        j_targets: substream(seed, stream::SURROGATE_BATCH),
        trace_eval: substream(seed, stream::TRACE_EVAL),
    };
    let mut selection = substream(seed, stream::SELECTION);
    let mut epoch_rng = substream(seed, stream::PREDICTOR_PRETRAIN + 50);
    let mut fixed_dataset: Option<SequenceDataset<Scalar>> = None;

    for j in 1..=outer_iters {
        // Inner maximization (or the frozen degeneracy).
        let theta_sel: Vec<Tensor<Scalar>> = if cfg.outer.frozen_reference {
            result.inner_traces.push(InnerTrace {
                epsilon: setup.epsilon,
                ..Default::default()
            });
            result.selected_theta_indices.push(0);
            setup.reference.params().to_vec()
        } else {
            let w_for_inner = w.clone();
            let loss_fn = move |x: &[Scalar]| -> Scalar {
                w_for_inner.generated_sample_loss(x).unwrap_or(Scalar::NAN)
            };
            let init = if cfg.inner.reset_per_outer {
                setup.reference.clone()
            } else {
                theta.clone()
            };
            if cfg.inner.reset_per_outer {
                dual = DualState::new(cfg.inner.mu_init, cfg.inner.eta, setup.epsilon)?;
            }
            let outcome = inner_max_run(
                &loss_fn,
                &init,
                &setup.reference,
                &s0,
                &setup.sched,
                &inner_cfg,
                dual,
                &setup.eval_targets,
                &mut rngs,
            )?;
            dual = outcome.dual;
            result.inner_traces.push(outcome.trace);
            let sel = if outcome.iterates.is_empty() {
                result.selected_theta_indices.push(0);
                setup.reference.params().to_vec()
            } else {
                let k = selection.gen_range(0..outcome.iterates.len());
                result.selected_theta_indices.push(k);
                if let Some(last) = outcome.iterates.last() {
                    theta.set_params(last.clone());
                }
                outcome.iterates[k].clone()
            };
            sel
        };
        result.selected_diffusion.push(theta_sel.clone());

        // Adversarial dataset from the selected iterate.
        let dataset_seed = derived_seed(seed, stream::DATASET_BASE + j as u64);
        result.dataset_seeds.push(dataset_seed);
        let s_j = match (&fixed_dataset, cfg.outer.resample_each_iter) {
            (Some(ds), false) => ds.clone(),
            _ => {
                let mut sampler = ScoreModel::clone(&setup.reference);
                sampler.set_params(theta_sel);
                let ds = sample_adversarial_dataset(
                    &sampler,
                    &setup.sched,
                    l_in,
                    l_out,
                    n_generate,
                    &mut substream(dataset_seed, 0),
                )?;
                if !cfg.outer.resample_each_iter {
                    fixed_dataset = Some(ds.clone());
                }
                ds
            }
        };

        // Outer loss and gradient norm at the pre-update parameters.
        let full = PredictionProblem::new(&w, &s_j)?;
        let (loss_j, grads) = full.loss_and_gradient(w.params())?;
        if !loss_j.is_finite() {
            return Err(TrainError::Invalid(format!(
                "non-finite outer loss at iteration {j}"
            )));
        }
        result.outer_losses.push(loss_j);
        let norm_sq: Scalar = grads.iter().map(|g| {
            let n = g.l2_norm();
            n * n
        }).sum();
        result.grad_norms.push(norm_sq.sqrt());

        // Decision-variable update: E epochs over S_j.
        match cfg.outer.optimizer {
            OptimizerChoice::Adam => {
                train_epochs(
                    &mut w,
                    &mut w_adam,
                    &s_j,
                    cfg.outer.epochs_per_dataset,
                    cfg.outer.batch_size,
                    &mut epoch_rng,
                )?;
            }
            OptimizerChoice::Sgd => {
                for _ in 0..cfg.outer.epochs_per_dataset {
                    w = outer_step(&w, &s_j, cfg.outer.learning_rate)?;
                }
            }
        }
        result.predictor_iterates.push(w.params().to_vec());
    }

    // Final decision variable: uniform over the outer iterates.
    let pick = selection.gen_range(0..outer_iters);
    result.selected_w_index = Some(pick);
    let mut final_w = setup.pretrained.clone();
    final_w.set_params(result.predictor_iterates[pick].clone());
    result.final_predictor = final_w;
    let mut final_theta = setup.reference.clone();
    final_theta.set_params(theta.params().to_vec());
    result.final_diffusion = Some(final_theta);
    Ok(result)
}

/// Mean prediction loss of a parameter snapshot on a dataset, recomputed
/// outside the training loop (trace cross-checks).
pub fn mean_loss_of_params(
    template: &DecisionModel<Scalar>,
    params: &[Tensor<Scalar>],
    data: &SequenceDataset<Scalar>,
) -> Result<Scalar, TrainError> {
    let mut w = template.clone();
    w.set_params(params.to_vec());
    let losses = w.per_sample_losses(data)?;
    Ok(kahan_sum(losses.iter().copied()) / losses.len() as Scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MethodSelect;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 3;
        cfg.method = MethodSelect::Ddro;
        cfg.predictor.window = 8;
        cfg.predictor.horizon = 1;
        cfg.predictor.hidden = vec![8];
        cfg.predictor.pretrain_epochs = 3;
        cfg.diffusion.steps = 10;
        cfg.diffusion.finetune_steps = 4;
        cfg.diffusion.hidden = vec![12];
        cfg.diffusion.embed_dim = 4;
        cfg.diffusion.pretrain_epochs = 3;
        cfg.inner.iterations = 2;
        cfg.inner.traj_batch = 6;
        cfg.outer.iterations = 2;
        cfg.outer.dataset_size = 12;
        cfg.outer.epochs_per_dataset = 1;
        cfg.outer.batch_size = 16;
        if let Some(s) = cfg.data.synthetic.as_mut() {
            s.length = 80;
        }
        cfg.data.synthetic_tests.truncate(1);
        if let Some(t) = cfg.data.synthetic_tests.first_mut() {
            t.spec.length = 60;
        }
        cfg
    }

    #[test]
    fn prepare_data_shapes_and_normalization() {
        let cfg = tiny_cfg();
        let data = prepare_data(&cfg).unwrap();
        assert_eq!(data.train.window_len(), 8);
        assert_eq!(data.train.len(), 80 - 9 + 1);
        assert_eq!(data.tests.len(), 1);
        let lo = data
            .train_series
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(lo.abs() < 1e-12);
    }

    #[test]
    fn outer_step_examples() {
        // λ=0 leaves w unchanged.
        let cfg = tiny_cfg();
        let data = prepare_data(&cfg).unwrap();
        let w = DecisionModel::new(8, 1, &[8], PredictorArch::Mlp, 1).unwrap();
        let w2 = outer_step(&w, &data.train, 0.0).unwrap();
        assert_eq!(w.params(), w2.params());
    }

    #[test]
    fn outer_step_scalar_quadratic_hand_gradient() {
        // f(w, x) = (w·1 - x)² on a single sample with window [1], so a
        // weight w and horizon 3 give w' = w - λ·2(w-3) = 1 - 0.1·(-4) = 1.4.
        let mut w = DecisionModel::<f64>::new(1, 1, &[], PredictorArch::Mlp, 0).unwrap();
        w.set_params(vec![
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        ]);
        let ds = SequenceDataset::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![3.0]).unwrap(),
        )
        .unwrap();
        let w2 = outer_step(&w, &ds, 0.1).unwrap();
        assert!((w2.params()[0].item() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn outer_gradient_equals_mean_of_per_sample_gradients() {
        let cfg = tiny_cfg();
        let data = prepare_data(&cfg).unwrap();
        let w = DecisionModel::new(8, 1, &[6], PredictorArch::Mlp, 2).unwrap();
        let sub = data.train.subset(&[0, 1, 2, 3, 4]);
        let problem = PredictionProblem::new(&w, &sub).unwrap();
        let (_, full_grads) = problem.loss_and_gradient(w.params()).unwrap();

        let mut acc: Vec<Tensor<f64>> =
            w.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        for i in 0..sub.len() {
            let single = sub.subset(&[i]);
            let p1 = PredictionProblem::new(&w, &single).unwrap();
            let (_, g1) = p1.loss_and_gradient(w.params()).unwrap();
            for (a, g) in acc.iter_mut().zip(&g1) {
                a.add_scaled(g, 1.0 / sub.len() as f64);
            }
        }
        for (a, b) in acc.iter().zip(&full_grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_outer_iterations_returns_initial_state() {
        let mut cfg = tiny_cfg();
        cfg.outer.iterations = 0;
        let setup = prepare(&cfg).unwrap();
        let out = ddro_train_with_setup(&cfg, &setup).unwrap();
        assert_eq!(out.final_predictor.params(), setup.pretrained.params());
        assert!(out.outer_losses.is_empty());
        assert!(out.inner_traces.is_empty());
    }

    #[test]
    fn same_config_and_seed_reproduces_run_result() {
        let cfg = tiny_cfg();
        let setup = prepare(&cfg).unwrap();
        let a = ddro_train_with_setup(&cfg, &setup).unwrap();
        let b = ddro_train_with_setup(&cfg, &setup).unwrap();
        assert_eq!(a.final_predictor.params(), b.final_predictor.params());
        assert_eq!(a.outer_losses, b.outer_losses);
        assert_eq!(a.selected_theta_indices, b.selected_theta_indices);
        assert_eq!(a.selected_w_index, b.selected_w_index);
    }

    #[test]
    fn trace_lengths_match_outer_iterations() {
        let cfg = tiny_cfg();
        let setup = prepare(&cfg).unwrap();
        let out = ddro_train_with_setup(&cfg, &setup).unwrap();
        let i = cfg.outer.iterations;
        assert_eq!(out.outer_losses.len(), i);
        assert_eq!(out.grad_norms.len(), i);
        assert_eq!(out.inner_traces.len(), i);
        assert_eq!(out.predictor_iterates.len(), i);
        assert_eq!(out.selected_diffusion.len(), i);
        assert_eq!(out.dataset_seeds.len(), i);
    }

    #[test]
    fn outer_loss_trace_matches_recomputation() {
        // Recompute mean f(w_{j-1}, S_j) from the recorded seeds and
        // selected diffusion iterates.
        let cfg = tiny_cfg();
        let setup = prepare(&cfg).unwrap();
        let out = ddro_train_with_setup(&cfg, &setup).unwrap();
        for j in 0..cfg.outer.iterations {
            let mut sampler = setup.reference.clone();
            sampler.set_params(out.selected_diffusion[j].clone());
            let s_j = sample_adversarial_dataset(
                &sampler,
                &setup.sched,
                cfg.predictor.window,
                cfg.predictor.horizon,
                cfg.outer.dataset_size,
                &mut substream(out.dataset_seeds[j], 0),
            )
            .unwrap();
            let w_params = if j == 0 {
                setup.pretrained.params().to_vec()
            } else {
                out.predictor_iterates[j - 1].clone()
            };
            let recomputed =
                mean_loss_of_params(&setup.pretrained, &w_params, &s_j).unwrap();
            assert!(
                (recomputed - out.outer_losses[j]).abs() < 1e-12,
                "iteration {j}: {} vs {}",
                recomputed,
                out.outer_losses[j]
            );
        }
    }
}
