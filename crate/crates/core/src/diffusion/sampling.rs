//! Closed-form forward perturbation and reverse Markov sampling.

use rand::Rng;

use crate::rng::RunRng;
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

use super::model::{reverse_mean_batch, NoisePredictor};
use super::schedule::NoiseSchedule;

/// One recorded reverse-chain realization.
///
/// Only the tail of the chain is kept: `tail[0] = x_{t_max}` down to
/// `tail[t_max] = x_0`, where `t_max = max(step_set)` and the step set is
/// the contiguous block `1..=t_max` of final reverse transitions.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    tail: Vec<Vec<T>>,
    step_set: Vec<usize>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(tail: Vec<Vec<T>>, step_set: Vec<usize>) -> Result<Self, TensorError> {
        let t_max = *step_set.last().unwrap_or(&0);
        if step_set.is_empty() || step_set.iter().enumerate().any(|(i, &t)| t != i + 1) {
            return Err(TensorError::Invalid(format!(
                "trajectory step set must be contiguous 1..=t_max, got {step_set:?}"
            )));
        }
        if tail.len() != t_max + 1 {
            return Err(TensorError::Invalid(format!(
                "trajectory tail holds {} states, step set 1..={} needs {}",
                tail.len(),
                t_max,
                t_max + 1
            )));
        }
        if tail.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(TensorError::NonFiniteData);
        }
        Ok(Self { tail, step_set })
    }

    pub fn step_set(&self) -> &[usize] {
        &self.step_set
    }

    /// State x_t for t within the recorded range.
    pub fn state(&self, t: usize) -> &[T] {
        let t_max = *self.step_set.last().unwrap();
        &self.tail[t_max - t]
    }

    pub fn x0(&self) -> &[T] {
        self.tail.last().unwrap()
    }
}

/// Closed-form Gaussian forward marginal:
/// `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1-ᾱ_t)·ξ`.
pub fn forward_perturb<T: Real>(
    x0: &[T],
    t: usize,
    xi: &[T],
    sched: &NoiseSchedule<T>,
) -> Result<Vec<T>, TensorError> {
    sched.check_step(t)?;
    if x0.len() != xi.len() {
        return Err(TensorError::Invalid(format!(
            "x0 has {} entries, noise draw has {}",
            x0.len(),
            xi.len()
        )));
    }
    let ab = sched.alpha_bar_at(t);
    let a = ab.sqrt();
    let b = (T::one() - ab).sqrt();
    Ok(x0.iter().zip(xi).map(|(&x, &e)| a * x + b * e).collect())
}

/// Samples drawn from the reverse chain, optionally with their recorded
/// trajectory tails.
pub struct SampleBatch<T> {
    pub samples: Tensor<T>,
    pub trajectories: Option<Vec<Trajectory<T>>>,
}

/// Run `n` reverse chains: `x_T ~ N(0, I)`, then
/// `x_{t-1} = μ_θ(x_t, t) + σ_t z_t` down to `x_0`.
///
/// With `keep_trajectories`, the tail over the schedule's fine-tuned step
/// set is recorded per chain. All chains share the generator, row by row,
/// so the batch is reproducible from the generator state.
pub fn reverse_sample<T: Real, P: NoisePredictor<T>>(
    model: &P,
    sched: &NoiseSchedule<T>,
    n: usize,
    rng: &mut RunRng,
    keep_trajectories: bool,
) -> Result<SampleBatch<T>, TensorError> {
    if n == 0 {
        return Err(TensorError::Invalid("sample count must be at least 1".into()));
    }
    let d = model.dim();
    let step_set = sched.finetuned_step_set();
    let record_from = step_set.last().copied().unwrap_or(0);

    let data: Vec<T> = (0..n * d).map(|_| T::standard_normal(rng)).collect();
    let mut x = Tensor::from_parts_unchecked(vec![n, d], data);
    let mut tails: Vec<Vec<Vec<T>>> = vec![Vec::new(); if keep_trajectories { n } else { 0 }];

    for t in (1..=sched.steps).rev() {
        if keep_trajectories && t == record_from {
            for (i, tail) in tails.iter_mut().enumerate() {
                tail.push(x.row(i).to_vec());
            }
        }
        let ts = vec![t; n];
        let eps = model.predict_eps(&x, &ts)?;
        let mut next = reverse_mean_batch(&x, &eps, t, sched);
        let sigma = sched.sigma_at(t);
        if sigma > T::zero() {
            for v in next.data_mut() {
                *v += sigma * T::standard_normal(rng);
            }
        }
        if !next.all_finite() {
            return Err(TensorError::Invalid(format!(
                "reverse chain diverged at step {t}"
            )));
        }
        if keep_trajectories && t <= record_from {
            for (i, tail) in tails.iter_mut().enumerate() {
                tail.push(next.row(i).to_vec());
            }
        }
        x = next;
    }

    let trajectories = if keep_trajectories {
        Some(
            tails
                .into_iter()
                .map(|tail| Trajectory::new(tail, step_set.clone()))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    Ok(SampleBatch {
        samples: x,
        trajectories,
    })
}

/// Standard-normal matrix draw, row-major.
pub fn normal_matrix<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::standard_normal(rng)).collect();
    Tensor::from_parts_unchecked(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ScoreModel;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perturb_limits() {
        let sched = NoiseSchedule::<f64>::linear(10, 1e-9, 1e-9, 0.1, 2).unwrap();
        // ᾱ_1 = 1 - 1e-9 ≈ 1: essentially no noise injected.
        let x = forward_perturb(&[1.0, -2.0], 1, &[5.0, 5.0], &sched).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(x[1], -2.0, epsilon = 1e-3);
        // x0 = 0 leaves the pure-noise branch.
        let sched = NoiseSchedule::<f64>::linear(10, 0.05, 0.3, 0.1, 2).unwrap();
        let t = 7;
        let xi = [0.4, -1.1];
        let got = forward_perturb(&[0.0, 0.0], t, &xi, &sched).unwrap();
        let b = (1.0 - sched.alpha_bar_at(t)).sqrt();
        assert_abs_diff_eq!(got[0], b * xi[0], epsilon = 1e-15);
        assert_abs_diff_eq!(got[1], b * xi[1], epsilon = 1e-15);
    }

    #[test]
    fn perturb_rejects_out_of_range_step() {
        let sched = NoiseSchedule::<f64>::linear(10, 0.05, 0.3, 0.1, 2).unwrap();
        assert!(forward_perturb(&[0.0], 0, &[0.0], &sched).is_err());
        assert!(forward_perturb(&[0.0], 11, &[0.0], &sched).is_err());
    }

    #[test]
    fn perturb_moments_match_marginal() {
        // Monte Carlo moment oracle: mean -> sqrt(ᾱ_t)·x0, var -> 1-ᾱ_t.
        let sched = NoiseSchedule::<f64>::linear(50, 0.008, 0.25, 0.2, 15).unwrap();
        let mut rng = substream(11, 0);
        let t = 20;
        let x0 = 0.7;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let xi = f64::standard_normal(&mut rng);
            let x = forward_perturb(&[x0], t, &[xi], &sched).unwrap()[0];
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let ab = sched.alpha_bar_at(t);
        let (m_true, v_true) = (ab.sqrt() * x0, 1.0 - ab);
        let se_mean = (v_true / n as f64).sqrt();
        let se_var = v_true * (2.0 / n as f64).sqrt();
        assert!((mean - m_true).abs() < 3.0 * se_mean, "mean {mean} vs {m_true}");
        assert!((var - v_true).abs() < 3.0 * se_var, "var {var} vs {v_true}");
    }

    #[test]
    fn same_generator_state_gives_identical_samples() {
        let sched = NoiseSchedule::<f64>::linear(20, 0.01, 0.2, 0.3, 5).unwrap();
        let m = ScoreModel::<f64>::new(2, &[8], 4, 3).unwrap();
        let a = reverse_sample(&m, &sched, 4, &mut substream(9, 0), false).unwrap();
        let b = reverse_sample(&m, &sched, 4, &mut substream(9, 0), false).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn deterministic_chain_telescopes_to_rescaled_prior_draw() {
        // ε̂ ≡ 0 and σ ≡ 0: each step divides by sqrt(α_t), so
        // x_0 = x_T / sqrt(ᾱ_T) exactly.
        let sched = NoiseSchedule::<f64>::linear(30, 0.01, 0.2, 0.0, 30).unwrap();
        let m = ScoreModel::<f64>::zeroed(3, &[4], 4).unwrap();
        let out = reverse_sample(&m, &sched, 2, &mut substream(5, 0), true).unwrap();
        // Reconstruct x_T from the same stream.
        let mut rng = substream(5, 0);
        let x_t = normal_matrix::<f64>(2, 3, &mut rng);
        let scale = 1.0 / sched.alpha_bar_at(30).sqrt();
        for i in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(
                    out.samples.get2(i, j),
                    x_t.get2(i, j) * scale,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn trajectories_record_the_finetuned_tail() {
        let sched = NoiseSchedule::<f64>::linear(20, 0.01, 0.2, 0.3, 5).unwrap();
        let m = ScoreModel::<f64>::new(2, &[8], 4, 3).unwrap();
        let out = reverse_sample(&m, &sched, 3, &mut substream(1, 0), true).unwrap();
        let trajs = out.trajectories.unwrap();
        assert_eq!(trajs.len(), 3);
        for (i, traj) in trajs.iter().enumerate() {
            assert_eq!(traj.step_set(), &[1, 2, 3, 4, 5]);
            assert_eq!(traj.x0(), out.samples.row(i));
            assert_eq!(traj.state(5).len(), 2);
        }
    }
}
