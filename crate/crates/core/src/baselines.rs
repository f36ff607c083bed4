//! Comparison trainers: plain ERM, diffusion-augmented ERM,
//! Wasserstein-DRO via projected adversarial perturbation, and KL-DRO via
//! exponential tilting.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::data::SequenceDataset;
use crate::predictor::{DecisionModel, PredictionProblem};
use crate::rng::{stream, substream};
use crate::scalar::kahan_sum;
use crate::tensor::{AdamState, Bindings, Graph, Tensor, TensorError};
use crate::trainer::{run_gdmo, RunResult, Scalar, TrainError, TrainSetup};

/// Worst-case loss over the KL ball plus the tilted weights attaining it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustLossReport {
    pub robust_value: f64,
    /// Optimal tilt temperature α*.
    pub alpha_star: f64,
    /// Tilted distribution at α*, non-negative, sums to one.
    pub weights: Vec<f64>,
}

/// Closed-form KL-DRO worst case: `min_{α>0} α ln mean exp(ℓ/α) + α ε`,
/// solved by a coarse log-grid scan plus golden-section refinement. The
/// weights are the tilted distribution `p_i ∝ exp(ℓ_i/α*)`.
pub fn kl_dro_robust_loss(losses: &[f64], epsilon: f64) -> Result<RobustLossReport, TensorError> {
    if losses.is_empty() {
        return Err(TensorError::Invalid("empty loss set".into()));
    }
    if !losses.iter().all(|v| v.is_finite()) {
        return Err(TensorError::Invalid("non-finite loss".into()));
    }
    if epsilon <= 0.0 {
        return Err(TensorError::Invalid(format!(
            "adversarial budget must be positive, got {epsilon}"
        )));
    }
    // Stabilized objective in u = ln α. The wide range keeps the ε → ∞
    // limit (max loss) reachable to tight tolerance.
    let objective = |u: f64| -> f64 {
        let alpha = u.exp();
        alpha * log_mean_exp(losses, alpha) + alpha * epsilon
    };
    let (lo, hi) = ((1e-6f64).ln(), (1e6f64).ln());
    // Coarse scan to bracket the minimum; the dual objective is unimodal
    // for bounded losses but flat regions make a plain golden section
    // start fragile.
    let scan = 400usize;
    let mut best_i = 0usize;
    let mut best_v = f64::INFINITY;
    for i in 0..=scan {
        let u = lo + (hi - lo) * i as f64 / scan as f64;
        let v = objective(u);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let step = (hi - lo) / scan as f64;
    let mut a = lo + step * best_i.saturating_sub(1) as f64;
    let mut b = (lo + step * (best_i + 1) as f64).min(hi);
    // Golden-section refinement on the bracketing interval.
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..120 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d);
        }
    }
    let u_star = 0.5 * (a + b);
    let alpha_star = u_star.exp();
    let robust_value = objective(u_star);

    let max_l = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = losses
        .iter()
        .map(|&l| ((l - max_l) / alpha_star).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(RobustLossReport {
        robust_value,
        alpha_star,
        weights,
    })
}

/// `ln (1/n Σ exp(ℓ_i / α))`, computed against the max for stability.
fn log_mean_exp(losses: &[f64], alpha: f64) -> f64 {
    let max_l = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = losses.iter().map(|&l| ((l - max_l) / alpha).exp()).sum();
    max_l / alpha + (sum / losses.len() as f64).ln()
}

/// Per-sample projected gradient ascent on `f(w, x+δ)` with `‖δ‖₂ ≤ budget`
/// applied to the windows; horizons stay untouched.
pub fn wdro_perturb(
    batch: &SequenceDataset<Scalar>,
    w: &DecisionModel<Scalar>,
    budget: f64,
    steps: usize,
    step_size: f64,
) -> Result<SequenceDataset<Scalar>, TrainError> {
    if budget < 0.0 {
        return Err(TrainError::Invalid("budget must be non-negative".into()));
    }
    if budget == 0.0 || steps == 0 {
        return Ok(batch.clone());
    }
    let (n, l_in) = (batch.len(), batch.window_len());
    let mut delta = Tensor::<Scalar>::zeros(&[n, l_in]);
    for _ in 0..steps {
        let perturbed = add_windows(batch, &delta)?;
        let problem = PredictionProblem::new(w, &perturbed)?;
        let grad = window_gradient(w, &problem)?;
        // Normalized per-row ascent step, then project onto the ℓ₂ ball.
        for i in 0..n {
            let norm = row_norm(&grad, i);
            if norm > 0.0 {
                let scale = step_size / norm;
                for jj in 0..l_in {
                    delta.data_mut()[i * l_in + jj] += scale * grad.get2(i, jj);
                }
            }
            let dnorm = row_norm(&delta, i);
            if dnorm > budget {
                let proj = budget / dnorm;
                for jj in 0..l_in {
                    delta.data_mut()[i * l_in + jj] *= proj;
                }
            }
        }
    }
    add_windows(batch, &delta)
}

fn add_windows(
    batch: &SequenceDataset<Scalar>,
    delta: &Tensor<Scalar>,
) -> Result<SequenceDataset<Scalar>, TrainError> {
    let windows = batch.windows().zip_map(delta, |a, b| a + b);
    Ok(SequenceDataset::new(windows, batch.horizons().clone())?)
}

fn row_norm(t: &Tensor<Scalar>, i: usize) -> f64 {
    t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn window_gradient(
    w: &DecisionModel<Scalar>,
    problem: &PredictionProblem<Scalar>,
) -> Result<Tensor<Scalar>, TrainError> {
    let (_, _, win_grad) = problem.loss_gradient_with_inputs(w.params())?;
    Ok(win_grad)
}

/// Weighted batch problem for the tilted KL-DRO update.
struct WeightedProblem {
    graph: Graph<Scalar>,
    loss: crate::tensor::NodeId,
    param_names: Vec<String>,
    feeds: Vec<(String, Tensor<Scalar>)>,
}

impl WeightedProblem {
    /// `Σ_i weight_i ‖pred_i - hor_i‖²/L_out` (weights on the simplex).
    fn new(
        model: &DecisionModel<Scalar>,
        batch: &SequenceDataset<Scalar>,
        weights: &[f64],
    ) -> Result<Self, TrainError> {
        let mut g = Graph::new();
        let win = g.input("win", batch.windows().shape())?;
        let hor = g.input("hor", batch.horizons().shape())?;
        let params = model.declare_params(&mut g, "pd")?;
        let pred = model.predict_node(&mut g, win, &params)?;
        let resid = g.sub(pred, hor)?;
        let sq = g.square(resid);
        let per_sample = g.row_sum(sq)?;
        let scaled = g.scale(per_sample, 1.0 / batch.horizon_len() as f64)?;
        let wcol = g.constant(Tensor::from_parts_unchecked(
            vec![weights.len(), 1],
            weights.to_vec(),
        ));
        let weighted = g.mul(scaled, wcol)?;
        let loss = g.sum(weighted);
        Ok(Self {
            graph: g,
            loss,
            param_names: model.param_names("pd"),
            feeds: vec![
                ("win".to_string(), batch.windows().clone()),
                ("hor".to_string(), batch.horizons().clone()),
            ],
        })
    }

    fn gradient(&self, params: &[Tensor<Scalar>]) -> Result<Vec<Tensor<Scalar>>, TrainError> {
        let mut bindings: Bindings<'_, Scalar> = BTreeMap::new();
        for (name, p) in self.param_names.iter().zip(params) {
            bindings.insert(name.clone(), p);
        }
        for (name, t) in &self.feeds {
            bindings.insert(name.clone(), t);
        }
        let eval = self.graph.forward(&bindings)?;
        let grads = self.graph.backward(&eval, self.loss)?;
        Ok(self
            .param_names
            .iter()
            .map(|name| self.graph.grad_of_input(&grads, name))
            .collect::<Result<Vec<_>, _>>()?)
    }
}

/// Train one of the comparison baselines on the shared setup.
pub fn train_baseline(
    method: Method,
    cfg: &ExperimentConfig,
    setup: &TrainSetup,
) -> Result<RunResult, TrainError> {
    match method {
        Method::Ddro => run_gdmo(cfg, setup, Method::Ddro),
        Method::Ml => train_ml(cfg, setup),
        Method::Dml => {
            // Configuration degeneracy of the outer loop: frozen reference
            // diffusion, one shared generated dataset, no dual.
            let mut dml_cfg = cfg.clone();
            dml_cfg.outer.frozen_reference = true;
            dml_cfg.outer.resample_each_iter = false;
            let mut out = run_gdmo(&dml_cfg, setup, Method::Dml)?;
            out.method = Method::Dml;
            Ok(out)
        }
        Method::Wdro => train_wdro(cfg, setup),
        Method::Kldro => train_kldro(cfg, setup),
    }
}

fn train_ml(cfg: &ExperimentConfig, setup: &TrainSetup) -> Result<RunResult, TrainError> {
    let mut w = setup.pretrained.clone();
    let mut result = RunResult {
        method: Method::Ml,
        final_predictor: w.clone(),
        final_diffusion: None,
        predictor_iterates: Vec::new(),
        selected_diffusion: Vec::new(),
        selected_theta_indices: Vec::new(),
        selected_w_index: None,
        outer_losses: Vec::new(),
        grad_norms: Vec::new(),
        inner_traces: Vec::new(),
        dataset_seeds: Vec::new(),
        epsilon_used: setup.epsilon,
        reference_loss: setup.reference_loss,
    };
    if cfg.ml.extra_epochs == 0 {
        return Ok(result);
    }
    let mut adam = AdamState::new(w.params(), cfg.outer.learning_rate);
    let mut rng = substream(cfg.seed, stream::PREDICTOR_PRETRAIN + 100);
    for _ in 0..cfg.ml.extra_epochs {
        let loss = epoch_with_adam(
            &mut w,
            &mut adam,
            &setup.data.train,
            cfg.outer.batch_size,
            &mut rng,
            |_batch, _w| Ok(None),
        )?;
        result.outer_losses.push(loss);
        result.predictor_iterates.push(w.params().to_vec());
    }
    result.final_predictor = w;
    Ok(result)
}

fn train_wdro(cfg: &ExperimentConfig, setup: &TrainSetup) -> Result<RunResult, TrainError> {
    let mut w = setup.pretrained.clone();
    let mut adam = AdamState::new(w.params(), cfg.outer.learning_rate);
    let mut rng = substream(cfg.seed, stream::WDRO);
    let mut losses = Vec::new();
    let mut iterates = Vec::new();
    let budget = cfg.wdro.budget;
    let (steps, step_size) = (cfg.wdro.steps, cfg.wdro.step_size);
    for _ in 0..cfg.wdro.epochs {
        let loss = epoch_with_adam(
            &mut w,
            &mut adam,
            &setup.data.train,
            cfg.outer.batch_size,
            &mut rng,
            |batch, w| Ok(Some(wdro_perturb(batch, w, budget, steps, step_size)?)),
        )?;
        losses.push(loss);
        iterates.push(w.params().to_vec());
    }
    Ok(RunResult {
        method: Method::Wdro,
        final_predictor: w,
        final_diffusion: None,
        predictor_iterates: iterates,
        selected_diffusion: Vec::new(),
        selected_theta_indices: Vec::new(),
        selected_w_index: None,
        outer_losses: losses,
        grad_norms: Vec::new(),
        inner_traces: Vec::new(),
        dataset_seeds: Vec::new(),
        epsilon_used: setup.epsilon,
        reference_loss: setup.reference_loss,
    })
}

fn train_kldro(cfg: &ExperimentConfig, setup: &TrainSetup) -> Result<RunResult, TrainError> {
    let mut w = setup.pretrained.clone();
    let mut adam = AdamState::new(w.params(), cfg.outer.learning_rate);
    let mut rng = substream(cfg.seed, stream::WDRO + 1);
    let mut losses = Vec::new();
    let mut iterates = Vec::new();
    let data = &setup.data.train;
    let n = data.len();
    let batch_size = cfg.outer.batch_size.min(n);
    for _ in 0..cfg.kldro.epochs {
        let order = shuffled(n, &mut rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(batch_size) {
            if chunk.len() < batch_size {
                break;
            }
            let batch = data.subset(chunk);
            let per_sample = w.per_sample_losses(&batch)?;
            let report = kl_dro_robust_loss(&per_sample, cfg.kldro.budget)?;
            epoch_losses.push(report.robust_value);
            let problem = WeightedProblem::new(&w, &batch, &report.weights)?;
            let grads = problem.gradient(w.params())?;
            adam.apply(w.params_mut(), &grads)?;
        }
        losses.push(mean(&epoch_losses));
        iterates.push(w.params().to_vec());
    }
    Ok(RunResult {
        method: Method::Kldro,
        final_predictor: w,
        final_diffusion: None,
        predictor_iterates: iterates,
        selected_diffusion: Vec::new(),
        selected_theta_indices: Vec::new(),
        selected_w_index: None,
        outer_losses: losses,
        grad_norms: Vec::new(),
        inner_traces: Vec::new(),
        dataset_seeds: Vec::new(),
        epsilon_used: setup.epsilon,
        reference_loss: setup.reference_loss,
    })
}

/// One epoch of minibatch Adam; `transform` may replace each batch (the
/// adversarial-perturbation hook). Returns the mean pre-step batch loss.
fn epoch_with_adam(
    w: &mut DecisionModel<Scalar>,
    adam: &mut AdamState<Scalar>,
    data: &SequenceDataset<Scalar>,
    batch_size: usize,
    rng: &mut crate::rng::RunRng,
    transform: impl Fn(
        &SequenceDataset<Scalar>,
        &DecisionModel<Scalar>,
    ) -> Result<Option<SequenceDataset<Scalar>>, TrainError>,
) -> Result<Scalar, TrainError> {
    let n = data.len();
    let batch_size = batch_size.min(n);
    let order = shuffled(n, rng);
    let mut losses = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size {
            break;
        }
        let batch = data.subset(chunk);
        let batch = match transform(&batch, w)? {
            Some(b) => b,
            None => batch,
        };
        let problem = PredictionProblem::new(w, &batch)?;
        let (loss, grads) = problem.loss_and_gradient(w.params())?;
        losses.push(loss);
        adam.apply(w.params_mut(), &grads)?;
    }
    Ok(mean(&losses))
}

fn shuffled(n: usize, rng: &mut crate::rng::RunRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    kahan_sum(v.iter().copied()) / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorArch;

    #[test]
    fn kl_dro_vanishing_ball_approaches_mean() {
        let losses = [0.2, 0.7, 1.1, 0.4];
        let report = kl_dro_robust_loss(&losses, 1e-9).unwrap();
        let mean: f64 = losses.iter().sum::<f64>() / 4.0;
        assert!((report.robust_value - mean).abs() < 1e-3);
    }

    #[test]
    fn kl_dro_degenerate_losses_stay_at_the_constant() {
        for eps in [0.05, 1.0, 10.0] {
            let report = kl_dro_robust_loss(&[0.6; 5], eps).unwrap();
            // The dual optimum sits at the α → 0 boundary; the residual
            // α_lo·ε stays below 1e-4 for the tested budgets.
            assert!((report.robust_value - 0.6).abs() < 1e-4, "eps {eps}");
            for w in &report.weights {
                assert!((w - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_dro_two_atom_value_matches_primal_grid_search() {
        // Direct primal oracle on {0, 1} with equal base mass: maximize
        // p·1 subject to KL((p,1-p) ‖ (1/2,1/2)) ≤ ε over a fine grid.
        let eps = 0.1;
        let report = kl_dro_robust_loss(&[0.0, 1.0], eps).unwrap();
        let mut best = f64::NEG_INFINITY;
        let steps = 100_000;
        for i in 0..=steps {
            let p = i as f64 / steps as f64;
            let q = 1.0 - p;
            let kl = kl_to_uniform(&[q, p]);
            if kl <= eps {
                best = best.max(p);
            }
        }
        assert!(
            (report.robust_value - best).abs() < 1e-3,
            "dual {} vs primal {}",
            report.robust_value,
            best
        );
    }

    fn kl_to_uniform(p: &[f64]) -> f64 {
        let n = p.len() as f64;
        p.iter()
            .filter(|&&pi| pi > 0.0)
            .map(|&pi| pi * (pi * n).ln())
            .sum()
    }

    #[test]
    fn kl_dro_monotone_in_budget_and_reaches_max() {
        let losses = [0.1, 0.5, 0.9, 0.3, 0.7];
        let mut prev = f64::NEG_INFINITY;
        for eps in [0.01, 0.1, 0.5, 1.0, 5.0, 50.0] {
            let r = kl_dro_robust_loss(&losses, eps).unwrap();
            assert!(r.robust_value >= prev - 1e-12, "not monotone at {eps}");
            assert!(r.robust_value >= mean(&losses) - 1e-9);
            prev = r.robust_value;
        }
        let r = kl_dro_robust_loss(&losses, 50.0).unwrap();
        assert!((r.robust_value - 0.9).abs() < 1e-3);
    }

    #[test]
    fn kl_dro_weights_sum_to_one_and_follow_losses() {
        let losses = [0.1, 0.9, 0.4, 0.6];
        let r = kl_dro_robust_loss(&losses, 0.3).unwrap();
        let total: f64 = r.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        // Higher loss, no smaller weight.
        let mut pairs: Vec<(f64, f64)> =
            losses.iter().cloned().zip(r.weights.iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-12);
        }
    }

    #[test]
    fn kl_dro_rejects_bad_inputs() {
        assert!(kl_dro_robust_loss(&[], 0.1).is_err());
        assert!(kl_dro_robust_loss(&[0.1], 0.0).is_err());
        assert!(kl_dro_robust_loss(&[0.1], -1.0).is_err());
    }

    fn tiny_batch() -> (DecisionModel<Scalar>, SequenceDataset<Scalar>) {
        let mut w = DecisionModel::<f64>::new(1, 1, &[], PredictorArch::Mlp, 0).unwrap();
        w.set_params(vec![
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        ]);
        let ds = SequenceDataset::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        )
        .unwrap();
        (w, ds)
    }

    #[test]
    fn wdro_zero_budget_is_identity() {
        let (w, ds) = tiny_batch();
        let out = wdro_perturb(&ds, &w, 0.0, 5, 0.1).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn wdro_scalar_quadratic_finds_the_boundary() {
        // f(x) = (w·x - 0)² with w = 0 is flat; use w = 1 so
        // f(x) = x², x = 1: ascent pushes to x = 1.5 at budget 0.5.
        let (mut w, ds) = tiny_batch();
        w.set_params(vec![
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        ]);
        let out = wdro_perturb(&ds, &w, 0.5, 30, 0.05).unwrap();
        let x = out.windows().item();
        // 1-d grid oracle over δ ∈ [-0.5, 0.5]: the max of (1+δ)² sits at
        // δ = +0.5.
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=1000 {
            let delta = -0.5 + i as f64 / 1000.0;
            let v = (1.0 + delta) * (1.0 + delta);
            if v > best.0 {
                best = (v, delta);
            }
        }
        assert!((x - (1.0 + best.1)).abs() < 1e-6, "got {x}");
    }

    #[test]
    fn wdro_respects_budget_and_never_decreases_loss() {
        let spec = crate::data::SynthSpec {
            length: 60,
            periods: vec![12.0],
            amplitudes: vec![1.0],
            phases: vec![],
            trend: 0.0,
            level: 0.0,
            innovation_sigma: 0.1,
            regime: None,
        };
        let s = crate::data::synth_generate::<f64>(&spec, 3).unwrap();
        let ds = SequenceDataset::from_samples(
            &crate::data::windowize(&s, 6, 1, 1).unwrap(),
        )
        .unwrap();
        let w = DecisionModel::<f64>::new(6, 1, &[5], PredictorArch::Mlp, 4).unwrap();
        let budget = 0.3;
        let out = wdro_perturb(&ds, &w, budget, 5, 0.1).unwrap();
        for i in 0..ds.len() {
            let mut norm2 = 0.0;
            for (a, b) in out.windows().row(i).iter().zip(ds.windows().row(i)) {
                norm2 += (a - b) * (a - b);
            }
            assert!(norm2.sqrt() <= budget + 1e-12);
        }
        let before = PredictionProblem::new(&w, &ds)
            .unwrap()
            .loss(w.params())
            .unwrap();
        let after = PredictionProblem::new(&w, &out)
            .unwrap()
            .loss(w.params())
            .unwrap();
        assert!(after >= before - 1e-12, "{after} < {before}");
    }
}
