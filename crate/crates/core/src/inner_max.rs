//! Lagrangian-relaxed adversarial fine-tuning of the diffusion model.
//!
//! The inner maximization ascends
//! `E_{P_θ}[f(w, x)] - μ · J(θ, S₀)` over the diffusion parameters while a
//! dual step regulates μ against the score-matching budget ε. Two
//! surrogates are provided: a trajectory-level PPO objective with a
//! clipped probability ratio anchored at a frozen reference chain (the
//! default), and the vanilla policy-gradient objective whose parameter
//! gradient is the score-function estimator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    draw_dsm_batch, dsm_loss_node, reverse_sample, DsmBatch, FrozenDsmTargets, NoiseSchedule,
    ScoreModel, Trajectory,
};
use crate::rng::RunRng;
use crate::scalar::{kahan_sum, Real};
use crate::tensor::{AdamState, Bindings, Graph, NodeId, Tensor, TensorError};

/// Log-space clamp applied to ratio exponents before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum InnerMaxError {
    #[error("inner maximization diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Lagrange multiplier state for the score-matching constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState<T> {
    /// Non-negative multiplier μ.
    pub mu: T,
    /// Dual step size η.
    pub eta: T,
    /// Adversarial budget ε on the score-matching loss.
    pub epsilon: T,
}

impl<T: Real> DualState<T> {
    pub fn new(mu: T, eta: T, epsilon: T) -> Result<Self, TensorError> {
        if mu < T::zero() {
            return Err(TensorError::Invalid(format!("mu must be non-negative, got {mu}")));
        }
        if eta <= T::zero() {
            return Err(TensorError::Invalid(format!("eta must be positive, got {eta}")));
        }
        if epsilon <= T::zero() {
            return Err(TensorError::Invalid(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { mu, eta, epsilon })
    }
}

/// Projected dual ascent: `μ' = max{0, μ + η (J - ε)}`.
pub fn dual_update<T: Real>(dual: DualState<T>, j_current: T) -> DualState<T> {
    let raw = dual.mu + dual.eta * (j_current - dual.epsilon);
    DualState {
        mu: raw.max(T::zero()),
        ..dual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    PolicyGradient,
    Ppo,
}

/// Inner-maximization settings.
#[derive(Debug, Clone)]
pub struct PpoConfig<T> {
    /// Clipping parameter κ in (0, 1).
    pub kappa: T,
    /// Number of final reverse steps fine-tuned (T'); also the step set
    /// for the ratio and the restricted constraint loss.
    pub finetune_steps: usize,
    /// Inner iteration count K.
    pub iterations: usize,
    pub surrogate: SurrogateKind,
    /// Adam step size for the ascent.
    pub learning_rate: T,
    /// Trajectory batch size.
    pub batch: usize,
    /// Subtract the batch-mean reward inside the policy-gradient
    /// surrogate. Off by default.
    pub use_baseline: bool,
    /// Samples for the per-iteration empirical E[f] trace entry;
    /// 0 disables the estimate.
    pub trace_f_samples: usize,
}

impl<T: Real> PpoConfig<T> {
    pub fn validate(&self, sched: &NoiseSchedule<T>) -> Result<(), TensorError> {
        if !(self.kappa > T::zero() && self.kappa < T::one()) {
            return Err(TensorError::Invalid(format!(
                "kappa must lie in (0,1), got {}",
                self.kappa
            )));
        }
        if self.finetune_steps < 1 || self.finetune_steps > sched.steps {
            return Err(TensorError::Invalid(format!(
                "finetune_steps must lie in 1..={}, got {}",
                sched.steps, self.finetune_steps
            )));
        }
        if self.batch == 0 {
            return Err(TensorError::Invalid("trajectory batch must be positive".into()));
        }
        Ok(())
    }

    pub fn step_set(&self) -> Vec<usize> {
        (1..=self.finetune_steps).collect()
    }
}

/// Trajectory-level importance ratio between two models, computed in log
/// space and clamped to ±[`LOG_RATIO_CLAMP`] before exponentiation.
pub fn ppo_ratio<T: Real>(
    model: &ScoreModel<T>,
    reference: &ScoreModel<T>,
    traj: &Trajectory<T>,
    sched: &NoiseSchedule<T>,
    step_set: &[usize],
) -> Result<T, TensorError> {
    let lp_model = crate::diffusion::traj_log_prob(model, traj, sched, step_set)?;
    let lp_ref = crate::diffusion::traj_log_prob(reference, traj, sched, step_set)?;
    let diff = lp_model - lp_ref;
    if !diff.is_finite() {
        return Err(TensorError::Invalid(format!(
            "ratio exponent non-finite: {lp_model} - {lp_ref}"
        )));
    }
    let clamp = T::cast(LOG_RATIO_CLAMP);
    Ok(diff.max(-clamp).min(clamp).exp())
}

/// A built surrogate objective: one graph evaluated repeatedly with fresh
/// parameters and a fresh μ, everything else baked in as constants.
pub struct SurrogateProblem<T> {
    graph: Graph<T>,
    /// Objective to maximize.
    objective: NodeId,
    /// Negated objective, differentiated for the ascent step.
    neg_objective: NodeId,
    param_names: Vec<String>,
    feeds: Vec<(String, Tensor<T>)>,
}

impl<T: Real> SurrogateProblem<T> {
    /// PPO surrogate: `mean_i min(r·f, clip(r, 1-κ, 1+κ)·f) - μ·J`.
    /// Trajectories must come from `reference`.
    pub fn ppo(
        model: &ScoreModel<T>,
        reference: &ScoreModel<T>,
        trajs: &[Trajectory<T>],
        f_values: &[T],
        sched: &NoiseSchedule<T>,
        cfg: &PpoConfig<T>,
        j_batch: &DsmBatch<T>,
    ) -> Result<Self, TensorError> {
        if trajs.is_empty() {
            return Err(TensorError::Invalid("empty trajectory batch".into()));
        }
        if trajs.len() != f_values.len() {
            return Err(TensorError::Invalid(format!(
                "{} trajectories but {} loss values",
                trajs.len(),
                f_values.len()
            )));
        }
        cfg.validate(sched)?;
        let step_set = cfg.step_set();
        let mut g = Graph::new();
        let params = model.declare_params(&mut g, "sm")?;
        let mu_in = g.input("mu", &[])?;

        let logp = chain_log_prob_node(&mut g, model, &params, trajs, sched, &step_set)?;
        let ref_logp: Vec<T> = trajs
            .iter()
            .map(|tr| crate::diffusion::traj_log_prob(reference, tr, sched, &step_set))
            .collect::<Result<_, _>>()?;
        let ref_node = g.constant(Tensor::from_parts_unchecked(vec![trajs.len(), 1], ref_logp));
        let diff = g.sub(logp, ref_node)?;
        let clamp = T::cast(LOG_RATIO_CLAMP);
        let diff = g.clip(diff, -clamp, clamp)?;
        let ratio = g.exp(diff);

        let f_node = g.constant(Tensor::from_parts_unchecked(
            vec![f_values.len(), 1],
            f_values.to_vec(),
        ));
        let unclipped = g.mul(ratio, f_node)?;
        let clipped_ratio = g.clip(ratio, T::one() - cfg.kappa, T::one() + cfg.kappa)?;
        let clipped = g.mul(clipped_ratio, f_node)?;
        let pess = g.min_elem(unclipped, clipped)?;
        let reward = g.mean(pess);

        Self::finish(g, model, reward, mu_in, j_batch, &params)
    }

    /// Policy-gradient surrogate: `mean_i ln P_θ(x_{0:T'}) f_i - μ·J`.
    /// Trajectories must come from the current model.
    pub fn policy_gradient(
        model: &ScoreModel<T>,
        trajs: &[Trajectory<T>],
        f_values: &[T],
        sched: &NoiseSchedule<T>,
        cfg: &PpoConfig<T>,
        j_batch: &DsmBatch<T>,
    ) -> Result<Self, TensorError> {
        if trajs.is_empty() {
            return Err(TensorError::Invalid("empty trajectory batch".into()));
        }
        if trajs.len() != f_values.len() {
            return Err(TensorError::Invalid(format!(
                "{} trajectories but {} loss values",
                trajs.len(),
                f_values.len()
            )));
        }
        cfg.validate(sched)?;
        let step_set = cfg.step_set();
        let mut g = Graph::new();
        let params = model.declare_params(&mut g, "sm")?;
        let mu_in = g.input("mu", &[])?;

        let logp = chain_log_prob_node(&mut g, model, &params, trajs, sched, &step_set)?;
        let rewards: Vec<T> = if cfg.use_baseline {
            let mean =
                kahan_sum(f_values.iter().copied()) / T::from_usize(f_values.len()).unwrap();
            f_values.iter().map(|&f| f - mean).collect()
        } else {
            f_values.to_vec()
        };
        let f_node = g.constant(Tensor::from_parts_unchecked(vec![rewards.len(), 1], rewards));
        let weighted = g.mul(logp, f_node)?;
        let reward = g.mean(weighted);

        Self::finish(g, model, reward, mu_in, j_batch, &params)
    }

    fn finish(
        mut g: Graph<T>,
        model: &ScoreModel<T>,
        reward: NodeId,
        mu_in: NodeId,
        j_batch: &DsmBatch<T>,
        params: &[NodeId],
    ) -> Result<Self, TensorError> {
        let (j_node, feeds) = dsm_loss_node(&mut g, model, params, j_batch, "j")?;
        let mu_j = g.mul(mu_in, j_node)?;
        let objective = g.sub(reward, mu_j)?;
        let neg_objective = g.neg(objective)?;
        Ok(Self {
            graph: g,
            objective,
            neg_objective,
            param_names: model.param_names("sm"),
            feeds,
        })
    }

    fn bindings<'a>(&'a self, params: &'a [Tensor<T>], mu: &'a Tensor<T>) -> Bindings<'a, T> {
        let mut b: Bindings<'a, T> = BTreeMap::new();
        for (name, p) in self.param_names.iter().zip(params) {
            b.insert(name.clone(), p);
        }
        for (name, t) in &self.feeds {
            b.insert(name.clone(), t);
        }
        b.insert("mu".into(), mu);
        b
    }

    /// Objective value at the given parameters and multiplier.
    pub fn objective(&self, params: &[Tensor<T>], mu: T) -> Result<T, TensorError> {
        let mu_t = Tensor::scalar(mu);
        let eval = self.graph.forward(&self.bindings(params, &mu_t))?;
        Ok(eval.value(self.objective).item())
    }

    /// Objective value and its parameter gradients.
    pub fn objective_and_gradient(
        &self,
        params: &[Tensor<T>],
        mu: T,
    ) -> Result<(T, Vec<Tensor<T>>), TensorError> {
        let mu_t = Tensor::scalar(mu);
        let eval = self.graph.forward(&self.bindings(params, &mu_t))?;
        let value = eval.value(self.objective).item();
        let grads = self.graph.backward(&eval, self.neg_objective)?;
        let out = self
            .param_names
            .iter()
            .map(|name| {
                let mut g = self.graph.grad_of_input(&grads, name)?;
                g.scale_in_place(-T::one()); // gradient of the objective itself
                Ok(g)
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok((value, out))
    }
}

/// θ-dependent restricted chain log-probability for a batch of
/// trajectories, as a `[B,1]` node: for each trajectory,
/// `-Σ_{t ∈ step_set} ‖x_{t-1} - μ_θ(x_t,t)‖² / (2σ_t²)`.
fn chain_log_prob_node<T: Real>(
    g: &mut Graph<T>,
    model: &ScoreModel<T>,
    params: &[NodeId],
    trajs: &[Trajectory<T>],
    sched: &NoiseSchedule<T>,
    step_set: &[usize],
) -> Result<NodeId, TensorError> {
    let b = trajs.len();
    let d = crate::diffusion::NoisePredictor::dim(model);
    let mut total: Option<NodeId> = None;
    for &t in step_set {
        sched.check_step(t)?;
        let sigma = sched.sigma_at(t);
        if sigma <= T::zero() {
            return Err(TensorError::Invalid(format!(
                "density undefined: sigma is zero at step {t}"
            )));
        }
        let mut xs = Vec::with_capacity(b * d);
        let mut xprev = Vec::with_capacity(b * d);
        for tr in trajs {
            xs.extend_from_slice(tr.state(t));
            xprev.extend_from_slice(tr.state(t - 1));
        }
        let x_t = g.constant(Tensor::from_parts_unchecked(vec![b, d], xs));
        let x_prev = g.constant(Tensor::from_parts_unchecked(vec![b, d], xprev));
        let emb = g.constant(model.embed_steps(&vec![t; b]));

        let eps = model.eps_node(g, x_t, emb, params)?;
        let coeff = sched.beta_at(t) / (T::one() - sched.alpha_bar_at(t)).sqrt();
        let scaled_eps = g.scale(eps, coeff)?;
        let centered = g.sub(x_t, scaled_eps)?;
        let mu = g.scale(centered, T::one() / sched.alpha_at(t).sqrt())?;
        let resid = g.sub(x_prev, mu)?;
        let sq = g.square(resid);
        let row = g.row_sum(sq)?;
        let term = g.scale(row, T::one() / (T::cast(2.0) * sigma * sigma))?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| TensorError::Invalid("empty step set".into()))?;
    g.neg(total)
}

/// Per-iteration record of the inner maximization.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InnerTrace<T> {
    /// J(θ_k, S₀) on the frozen evaluation targets.
    pub j_values: Vec<T>,
    /// μ used by the surrogate at step k (before the dual update).
    pub mu_values: Vec<T>,
    /// Empirical E_{P_θk}[f]; empty when disabled.
    pub f_expectation: Vec<T>,
    /// Surrogate objective value at the pre-step parameters.
    pub objective_values: Vec<T>,
    /// Budget the dual was run against.
    pub epsilon: T,
}

/// Inner-maximization outputs: all K iterates plus the trace.
#[derive(Debug)]
pub struct InnerMaxOutcome<T> {
    pub iterates: Vec<Vec<Tensor<T>>>,
    pub trace: InnerTrace<T>,
    pub dual: DualState<T>,
}

/// Random streams consumed by one inner-maximization run.
pub struct InnerMaxRng {
    pub trajectories: RunRng,
    pub j_targets: RunRng,
    pub trace_eval: RunRng,
}

/// Run K iterations of surrogate ascent with dual updates.
///
/// `loss_fn` is f(w, ·) with the decision variable baked in; its values
/// are treated as detached scalars. The reference stays fixed for the
/// whole run; PPO reuses one trajectory pool drawn from it, while the
/// policy-gradient surrogate re-samples from the current iterate.
#[allow(clippy::too_many_arguments)]
pub fn inner_max_run<T: Real>(
    loss_fn: &dyn Fn(&[T]) -> T,
    model_init: &ScoreModel<T>,
    reference: &ScoreModel<T>,
    s0: &Tensor<T>,
    sched: &NoiseSchedule<T>,
    cfg: &PpoConfig<T>,
    dual_init: DualState<T>,
    eval_targets: &FrozenDsmTargets<T>,
    rngs: &mut InnerMaxRng,
) -> Result<InnerMaxOutcome<T>, InnerMaxError> {
    let mut trace = InnerTrace {
        epsilon: dual_init.epsilon,
        ..Default::default()
    };
    let mut dual = dual_init;
    if cfg.iterations == 0 {
        return Ok(InnerMaxOutcome {
            iterates: Vec::new(),
            trace,
            dual,
        });
    }
    cfg.validate(sched)?;
    let step_set = cfg.step_set();

    let mut model = model_init.clone();
    let mut adam = AdamState::new(model.params(), cfg.learning_rate);
    let mut iterates = Vec::with_capacity(cfg.iterations);

    // Constraint targets for the surrogate's J term, frozen for the run
    // so the inner objective is a deterministic function of θ.
    let j_batch = draw_dsm_batch(&model, s0, sched, &step_set, &mut rngs.j_targets)?;

    // PPO: one pool from the frozen reference, reused across iterations.
    let mut problem: Option<SurrogateProblem<T>> = None;
    if cfg.surrogate == SurrogateKind::Ppo {
        let batch = reverse_sample(reference, sched, cfg.batch, &mut rngs.trajectories, true)?;
        let trajs = batch.trajectories.expect("trajectories requested");
        let f_values: Vec<T> = trajs.iter().map(|tr| loss_fn(tr.x0())).collect();
        problem = Some(SurrogateProblem::ppo(
            &model, reference, &trajs, &f_values, sched, cfg, &j_batch,
        )?);
    }

    for k in 0..cfg.iterations {
        if cfg.surrogate == SurrogateKind::PolicyGradient {
            let batch = reverse_sample(&model, sched, cfg.batch, &mut rngs.trajectories, true)?;
            let trajs = batch.trajectories.expect("trajectories requested");
            let f_values: Vec<T> = trajs.iter().map(|tr| loss_fn(tr.x0())).collect();
            problem = Some(SurrogateProblem::policy_gradient(
                &model, &trajs, &f_values, sched, cfg, &j_batch,
            )?);
        }
        let step_problem = problem.as_ref().expect("surrogate built");

        let (value, grads) = step_problem
            .objective_and_gradient(model.params(), dual.mu)
            .map_err(|e| match e {
                TensorError::NonFinite { .. } => InnerMaxError::Diverged {
                    iteration: k + 1,
                    detail: e.to_string(),
                },
                other => InnerMaxError::Tensor(other),
            })?;
        if !value.is_finite() {
            return Err(InnerMaxError::Diverged {
                iteration: k + 1,
                detail: format!("objective value {value}"),
            });
        }
        // Ascent: Adam minimizes, so feed it the negated gradient.
        let descent: Vec<Tensor<T>> = grads
            .iter()
            .map(|g| {
                let mut d = g.clone();
                d.scale_in_place(-T::one());
                d
            })
            .collect();
        adam.apply(model.params_mut(), &descent)
            .map_err(InnerMaxError::Tensor)?;

        let j_k = eval_targets.loss(&model)?;
        trace.j_values.push(j_k);
        trace.mu_values.push(dual.mu);
        trace.objective_values.push(value);
        if cfg.trace_f_samples > 0 {
            let sampled = reverse_sample(
                &model,
                sched,
                cfg.trace_f_samples,
                &mut rngs.trace_eval,
                false,
            )?;
            let n = sampled.samples.rows();
            let mean = kahan_sum((0..n).map(|i| loss_fn(sampled.samples.row(i))))
                / T::from_usize(n).unwrap();
            trace.f_expectation.push(mean);
        }
        iterates.push(model.params().to_vec());
        dual = dual_update(dual, j_k);
    }

    Ok(InnerMaxOutcome {
        iterates,
        trace,
        dual,
    })
}
