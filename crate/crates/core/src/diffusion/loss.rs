//! Denoising score-matching loss and trajectory log-probability.

use std::collections::BTreeMap;

use rand::Rng;

use crate::rng::RunRng;
use crate::scalar::{kahan_sum, Real};
use crate::tensor::{Bindings, Graph, NodeId, Tensor, TensorError};

use super::model::{NoisePredictor, ScoreModel};
use super::sampling::{forward_perturb, Trajectory};
use super::schedule::NoiseSchedule;

/// Pre-drawn denoising regression targets: perturbed states `x_t`, the
/// matching step embeddings, and the injected noise ξ each row must
/// reproduce.
#[derive(Debug, Clone)]
pub struct DsmBatch<T> {
    pub x_t: Tensor<T>,
    pub emb: Tensor<T>,
    pub xi: Tensor<T>,
    pub steps: Vec<usize>,
}

/// Draw one batch: for every row of `x0`, a uniform step from `step_set`,
/// a fresh standard-normal ξ, and the closed-form perturbation.
pub fn draw_dsm_batch<T: Real>(
    model: &ScoreModel<T>,
    x0: &Tensor<T>,
    sched: &NoiseSchedule<T>,
    step_set: &[usize],
    rng: &mut RunRng,
) -> Result<DsmBatch<T>, TensorError> {
    if x0.rows() == 0 {
        return Err(TensorError::Invalid("empty batch".into()));
    }
    if step_set.is_empty() {
        return Err(TensorError::Invalid("empty step set".into()));
    }
    if let Some(&bad) = step_set.iter().find(|&&t| t < 1 || t > sched.steps) {
        return Err(TensorError::Invalid(format!(
            "step {bad} outside schedule range 1..={}",
            sched.steps
        )));
    }
    let (n, d) = (x0.shape()[0], x0.shape()[1]);
    let mut steps = Vec::with_capacity(n);
    let mut xi = Vec::with_capacity(n * d);
    let mut x_t = Vec::with_capacity(n * d);
    for i in 0..n {
        let t = step_set[rng.gen_range(0..step_set.len())];
        steps.push(t);
        let noise: Vec<T> = (0..d).map(|_| T::standard_normal(rng)).collect();
        let row = forward_perturb(x0.row(i), t, &noise, sched)?;
        x_t.extend_from_slice(&row);
        xi.extend_from_slice(&noise);
    }
    let emb = model.embed_steps(&steps);
    Ok(DsmBatch {
        x_t: Tensor::from_parts_unchecked(vec![n, d], x_t),
        emb,
        xi: Tensor::from_parts_unchecked(vec![n, d], xi),
        steps,
    })
}

/// Append the loss node `mean_i ‖ξ_i - ε̂_θ(x_{t_i}, t_i)‖²` for a drawn
/// batch; gradient flows into the declared parameter nodes.
pub fn dsm_loss_node<T: Real>(
    g: &mut Graph<T>,
    model: &ScoreModel<T>,
    params: &[NodeId],
    batch: &DsmBatch<T>,
    input_prefix: &str,
) -> Result<(NodeId, Vec<(String, Tensor<T>)>), TensorError> {
    let (n, d) = (batch.x_t.shape()[0], batch.x_t.shape()[1]);
    let x_name = format!("{input_prefix}_xt");
    let e_name = format!("{input_prefix}_emb");
    let xi_name = format!("{input_prefix}_xi");
    let x = g.input(&x_name, &[n, d])?;
    let e = g.input(&e_name, batch.emb.shape())?;
    let xi = g.input(&xi_name, &[n, d])?;
    let eps = model.eps_node(g, x, e, params)?;
    let resid = g.sub(xi, eps)?;
    let sq = g.square(resid);
    let per_sample = g.row_sum(sq)?;
    let loss = g.mean(per_sample);
    let feeds = vec![
        (x_name, batch.x_t.clone()),
        (e_name, batch.emb.clone()),
        (xi_name, batch.xi.clone()),
    ];
    Ok((loss, feeds))
}

/// Empirical denoising score-matching loss of any predictor, measured in
/// the ε-parameterization over uniformly drawn steps of `step_set`:
/// `mean_i ‖ξ_i - ε̂(x_{t_i}, t_i)‖²`. Deterministic given the seed.
pub fn dsm_loss<T: Real, P: NoisePredictor<T>>(
    model: &P,
    x0: &Tensor<T>,
    sched: &NoiseSchedule<T>,
    step_set: &[usize],
    rng: &mut RunRng,
) -> Result<T, TensorError> {
    if x0.rows() == 0 {
        return Err(TensorError::Invalid("empty batch".into()));
    }
    if step_set.is_empty() {
        return Err(TensorError::Invalid("empty step set".into()));
    }
    let (n, d) = (x0.shape()[0], x0.shape()[1]);
    let mut steps = Vec::with_capacity(n);
    let mut xi = Vec::with_capacity(n * d);
    let mut x_t = Vec::with_capacity(n * d);
    for i in 0..n {
        let t = step_set[rng.gen_range(0..step_set.len())];
        sched.check_step(t)?;
        steps.push(t);
        let noise: Vec<T> = (0..d).map(|_| T::standard_normal(rng)).collect();
        let row = forward_perturb(x0.row(i), t, &noise, sched)?;
        x_t.extend_from_slice(&row);
        xi.extend_from_slice(&noise);
    }
    let x_t = Tensor::from_parts_unchecked(vec![n, d], x_t);
    let eps = model.predict_eps(&x_t, &steps)?;
    let per_sample = (0..n).map(|i| {
        let base = i * d;
        kahan_sum((0..d).map(|j| {
            let r = xi[base + j] - eps.data()[base + j];
            r * r
        }))
    });
    Ok(kahan_sum(per_sample) / T::from_usize(n).unwrap())
}

/// Fixed evaluation targets for the constraint loss: one (t, ξ) draw per
/// data row, frozen for a whole run so that J(θ) comparisons across inner
/// iterations use common random numbers.
#[derive(Debug, Clone)]
pub struct FrozenDsmTargets<T> {
    batch: DsmBatch<T>,
}

impl<T: Real> FrozenDsmTargets<T> {
    pub fn draw(
        model: &ScoreModel<T>,
        x0: &Tensor<T>,
        sched: &NoiseSchedule<T>,
        step_set: &[usize],
        rng: &mut RunRng,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            batch: draw_dsm_batch(model, x0, sched, step_set, rng)?,
        })
    }

    /// J(θ) against the frozen targets.
    pub fn loss(&self, model: &ScoreModel<T>) -> Result<T, TensorError> {
        let eps = model.predict_eps(&self.batch.x_t, &self.batch.steps)?;
        let (n, d) = (self.batch.x_t.shape()[0], self.batch.x_t.shape()[1]);
        let per_sample = (0..n).map(|i| {
            let base = i * d;
            kahan_sum((0..d).map(|j| {
                let r = self.batch.xi.data()[base + j] - eps.data()[base + j];
                r * r
            }))
        });
        Ok(kahan_sum(per_sample) / T::from_usize(n).unwrap())
    }
}

/// θ-dependent part of the reverse-chain log-density over the step set:
/// `-Σ_t ‖x_{t-1} - μ_θ(x_t, t)‖² / (2 σ_t²)`.
///
/// The Gaussian normalizers and the prior term are constants in θ and are
/// excluded by contract. Compensated summation keeps the result stable
/// under permutations of the step terms.
pub fn traj_log_prob<T: Real, P: NoisePredictor<T>>(
    model: &P,
    traj: &Trajectory<T>,
    sched: &NoiseSchedule<T>,
    step_set: &[usize],
) -> Result<T, TensorError> {
    let terms = traj_residual_terms(model, traj, sched, step_set)?;
    Ok(-kahan_sum(terms.into_iter()))
}

/// Per-step weighted squared residuals `‖x_{t-1} - μ_θ(x_t,t)‖²/(2σ_t²)`,
/// ordered by ascending t.
fn traj_residual_terms<T: Real, P: NoisePredictor<T>>(
    model: &P,
    traj: &Trajectory<T>,
    sched: &NoiseSchedule<T>,
    step_set: &[usize],
) -> Result<Vec<T>, TensorError> {
    let recorded_max = *traj.step_set().last().unwrap();
    let mut terms = Vec::with_capacity(step_set.len());
    for &t in step_set {
        sched.check_step(t)?;
        if t > recorded_max {
            return Err(TensorError::Invalid(format!(
                "trajectory records steps 1..={recorded_max}, requested {t}"
            )));
        }
        let sigma = sched.sigma_at(t);
        if sigma <= T::zero() {
            return Err(TensorError::Invalid(format!(
                "density undefined: sigma is zero at step {t}"
            )));
        }
        let x_t = traj.state(t);
        let x_prev = traj.state(t - 1);
        let d = x_t.len();
        let xt = Tensor::from_parts_unchecked(vec![1, d], x_t.to_vec());
        let eps = model.predict_eps(&xt, &[t])?;
        let mu = super::model::reverse_mean_batch(&xt, &eps, t, sched);
        let sq_norm = kahan_sum((0..d).map(|j| {
            let r = x_prev[j] - mu.data()[j];
            r * r
        }));
        terms.push(sq_norm / (T::cast(2.0) * sigma * sigma));
    }
    Ok(terms)
}

/// Evaluate a loss node built by [`dsm_loss_node`] for a standalone value
/// check (test support; trainers evaluate inside larger graphs).
pub fn eval_loss_node<T: Real>(
    g: &Graph<T>,
    model: &ScoreModel<T>,
    prefix: &str,
    loss: NodeId,
    feeds: &[(String, Tensor<T>)],
) -> Result<T, TensorError> {
    let mut bindings: Bindings<'_, T> = BTreeMap::new();
    for (name, tensor) in feeds {
        bindings.insert(name.clone(), tensor);
    }
    model.bind_params(prefix, &mut bindings);
    let eval = g.forward(&bindings)?;
    Ok(eval.value(loss).item())
}
