//! Evaluation metrics, distribution-shift measurement, and the
//! analytic-Gaussian verification probes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::diffusion::{dsm_loss, reverse_sample, NoisePredictor, NoiseSchedule};
use crate::predictor::DecisionModel;
use crate::rng::RunRng;
use crate::scalar::{kahan_sum, Real};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::RunResult;

/// A reported estimate with its sample count and standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub samples: usize,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            samples: 0,
            std_error: 0.0,
        }
    }
}

/// Probe output: estimates plus trend summaries and pass/fail flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    pub estimates: BTreeMap<String, Estimate>,
    pub slopes: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
}

/// Mean squared prediction error over a dataset:
/// `mean_i ‖predict(window_i) - horizon_i‖² / L_out`.
pub fn mse_eval<T: Real>(
    w: &DecisionModel<T>,
    dataset: &SequenceDataset<T>,
) -> Result<T, TensorError> {
    let losses = w.per_sample_losses(dataset)?;
    Ok(kahan_sum(losses.iter().copied()) / T::from_usize(losses.len()).unwrap())
}

/// Empirical 1-d Wasserstein-1 distance via quantile coupling. Equal-size
/// inputs reduce to the mean absolute difference of the sorted arrays;
/// unequal sizes integrate |F_a - F_b| over the merged support.
pub fn wasserstein1<T: Real>(a: &[T], b: &[T]) -> Result<T, TensorError> {
    if a.is_empty() || b.is_empty() {
        return Err(TensorError::Invalid("empty sample set".into()));
    }
    let mut sa: Vec<T> = a.to_vec();
    let mut sb: Vec<T> = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if sa.len() == sb.len() {
        let n = T::from_usize(sa.len()).unwrap();
        return Ok(kahan_sum(sa.iter().zip(&sb).map(|(&x, &y)| (x - y).abs())) / n);
    }
    // ∫ |F_a(x) - F_b(x)| dx over the union of breakpoints.
    let mut grid: Vec<T> = sa.iter().chain(sb.iter()).copied().collect();
    grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let na = T::from_usize(sa.len()).unwrap();
    let nb = T::from_usize(sb.len()).unwrap();
    let mut total = T::zero();
    for w in grid.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        if x1 <= x0 {
            continue;
        }
        let fa = T::from_usize(sa.partition_point(|&v| v <= x0)).unwrap() / na;
        let fb = T::from_usize(sb.partition_point(|&v| v <= x0)).unwrap() / nb;
        total += (fa - fb).abs() * (x1 - x0);
    }
    Ok(total)
}

/// Closed-form KL divergence between two univariate Gaussians.
pub fn gaussian_kl<T: Real>(m1: T, v1: T, m2: T, v2: T) -> Result<T, TensorError> {
    if v1 <= T::zero() || v2 <= T::zero() {
        return Err(TensorError::Invalid(format!(
            "variances must be positive, got {v1}, {v2}"
        )));
    }
    let half = T::cast(0.5);
    Ok(half * (v1 / v2 + (m2 - m1) * (m2 - m1) / v2 - T::one() + (v2 / v1).ln()))
}

/// Score of the forward marginal when the data distribution is the 1-d
/// Gaussian N(m₀, v₀): the marginal at step t is
/// N(sqrt(ᾱ_t)·m₀, ᾱ_t·v₀ + 1 - ᾱ_t), so the score is linear in x.
pub fn analytic_gaussian_score<T: Real>(
    x: T,
    t: usize,
    m0: T,
    v0: T,
    sched: &NoiseSchedule<T>,
) -> T {
    let ab = sched.alpha_bar_at(t);
    let mean = ab.sqrt() * m0;
    let var = ab * v0 + (T::one() - ab);
    -(x - mean) / var
}

/// Noise predictor wired to the analytic Gaussian score: the exact
/// ε̂*(x,t) = -sqrt(1-ᾱ_t) · ∇ log P_t(x).
#[derive(Debug, Clone)]
pub struct AnalyticGaussianPredictor<T> {
    pub m0: T,
    pub v0: T,
    pub sched: NoiseSchedule<T>,
}

impl<T: Real> NoisePredictor<T> for AnalyticGaussianPredictor<T> {
    fn dim(&self) -> usize {
        1
    }

    fn predict_eps(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, TensorError> {
        let mut out = x.clone();
        for (i, &t) in ts.iter().enumerate() {
            let s = analytic_gaussian_score(x.data()[i], t, self.m0, self.v0, &self.sched);
            out.data_mut()[i] = -(T::one() - self.sched.alpha_bar_at(t)).sqrt() * s;
        }
        Ok(out)
    }
}

/// Minimal achievable ε-space denoising loss for Gaussian data, averaged
/// over the step set: `mean_t ᾱ_t v₀ / (ᾱ_t v₀ + 1 - ᾱ_t)` (1-d).
pub fn optimal_gaussian_dsm<T: Real>(v0: T, sched: &NoiseSchedule<T>, step_set: &[usize]) -> T {
    let total = kahan_sum(step_set.iter().map(|&t| {
        let ab = sched.alpha_bar_at(t);
        ab * v0 / (ab * v0 + T::one() - ab)
    }));
    total / T::from_usize(step_set.len()).unwrap()
}

/// Verification probe for the KL-vs-score-matching relationship on a 1-d
/// Gaussian data distribution, where every reference quantity has a
/// closed form.
///
/// Reports: the model's denoising loss on `step_set`, its excess over the
/// closed-form optimum, the KL of N(m₀,v₀) against a Gaussian moment fit
/// of reverse samples, and the closed-form KL of the forward marginal at
/// T against the standard-normal prior.
#[allow(clippy::too_many_arguments)]
pub fn lemma1_probe<T: Real, P: NoisePredictor<T>>(
    model: &P,
    sched: &NoiseSchedule<T>,
    m0: T,
    v0: T,
    step_set: &[usize],
    data_samples: usize,
    reverse_samples: usize,
    rng: &mut RunRng,
) -> Result<ProbeReport, TensorError> {
    if model.dim() != 1 {
        return Err(TensorError::Invalid(
            "the analytic probe is defined for 1-d models".into(),
        ));
    }
    // Denoising loss on freshly drawn Gaussian data.
    let data: Vec<T> = (0..data_samples)
        .map(|_| m0 + v0.sqrt() * T::standard_normal(rng))
        .collect();
    let x0 = Tensor::from_parts_unchecked(vec![data_samples, 1], data);
    let dsm = dsm_loss(model, &x0, sched, step_set, rng)?;
    // Standard error of a mean of squared residuals: use the χ²-style
    // bound Var ≈ 2·mean² as a conservative scale.
    let dsm_f = dsm.to_f64_lossy();
    let dsm_se = (2.0 * dsm_f * dsm_f / data_samples as f64).sqrt();

    let optimal = optimal_gaussian_dsm(v0, sched, step_set).to_f64_lossy();

    // Moment fit of the reverse-sampler output.
    let out = reverse_sample(model, sched, reverse_samples, rng, false)?;
    let n = out.samples.rows();
    let nf = n as f64;
    let mean: f64 = out.samples.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / nf;
    let var: f64 = out
        .samples
        .data()
        .iter()
        .map(|v| {
            let d = v.to_f64_lossy() - mean;
            d * d
        })
        .sum::<f64>()
        / (nf - 1.0);
    let kl_fit = gaussian_kl(
        m0.to_f64_lossy(),
        v0.to_f64_lossy(),
        mean,
        var.max(1e-12),
    )?;
    // Delta-method error propagation through (m̂, v̂).
    let se_mean = (var / nf).sqrt();
    let se_var = var * (2.0 / nf).sqrt();
    let dkl_dm = (mean - m0.to_f64_lossy()).abs() / var;
    let dkl_dv = ((1.0 / var - v0.to_f64_lossy() / (var * var)).abs()
        + (mean - m0.to_f64_lossy()).powi(2) / (var * var))
        * 0.5;
    let kl_se = dkl_dm * se_mean + dkl_dv * se_var;

    // Closed-form forward-marginal KL at T against the prior.
    let ab_t = sched.alpha_bar_at(sched.steps);
    let kl_forward = gaussian_kl(
        (ab_t.sqrt() * m0).to_f64_lossy(),
        (ab_t * v0 + (T::one() - ab_t)).to_f64_lossy(),
        0.0,
        1.0,
    )?;

    let mut report = ProbeReport::default();
    report.estimates.insert(
        "dsm_loss".into(),
        Estimate {
            value: dsm_f,
            samples: data_samples,
            std_error: dsm_se,
        },
    );
    report.estimates.insert(
        "dsm_excess".into(),
        Estimate {
            value: dsm_f - optimal,
            samples: data_samples,
            std_error: dsm_se,
        },
    );
    report.estimates.insert(
        "kl_model_fit".into(),
        Estimate {
            value: kl_fit,
            samples: n,
            std_error: kl_se,
        },
    );
    report
        .estimates
        .insert("kl_forward".into(), Estimate::exact(kl_forward));
    report
        .flags
        .insert("kl_model_fit_below_0.02".into(), kl_fit < 0.02);
    Ok(report)
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Centered moving average followed by a least-squares slope; the
/// smoothing width is 5 to damp min-max oscillation.
pub fn smoothed_slope(trace: &[f64]) -> f64 {
    if trace.len() < 2 {
        return 0.0;
    }
    let smoothed = moving_average(trace, 5);
    ls_slope(&smoothed)
}

fn moving_average(v: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn ls_slope(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = v.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in v.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Trace diagnostics for one training run: constraint violation against
/// the budget, the trend of the inner E[f] estimates, and the smoothed
/// outer gradient-norm slope (the Moreau-envelope proxy).
pub fn convergence_probe(result: &RunResult) -> Result<ProbeReport, TensorError> {
    trace_diagnostics(&result.inner_traces, &result.grad_norms)
}

/// Core of [`convergence_probe`], reusable from persisted traces.
pub fn trace_diagnostics(
    inner_traces: &[crate::inner_max::InnerTrace<f64>],
    grad_norms: &[f64],
) -> Result<ProbeReport, TensorError> {
    if inner_traces.is_empty() && grad_norms.is_empty() {
        return Err(TensorError::Invalid("run carries no traces".into()));
    }
    let mut report = ProbeReport::default();

    let mut violations = Vec::new();
    let mut f_slopes = Vec::new();
    for trace in inner_traces {
        if trace.j_values.is_empty() {
            continue;
        }
        let mean_j =
            kahan_sum(trace.j_values.iter().copied()) / trace.j_values.len() as f64;
        violations.push((mean_j - trace.epsilon).max(0.0));
        if trace.f_expectation.len() >= 2 {
            f_slopes.push(smoothed_slope(&trace.f_expectation));
        }
    }
    if !violations.is_empty() {
        let mean_violation = kahan_sum(violations.iter().copied()) / violations.len() as f64;
        report
            .estimates
            .insert("mean_constraint_violation".into(), Estimate::exact(mean_violation));
    }
    if !f_slopes.is_empty() {
        let mean_slope = kahan_sum(f_slopes.iter().copied()) / f_slopes.len() as f64;
        report.slopes.insert("inner_f_expectation".into(), mean_slope);
        report
            .flags
            .insert("inner_f_increasing".into(), mean_slope > 0.0);
    }
    if grad_norms.len() >= 2 {
        let slope = smoothed_slope(grad_norms);
        report.slopes.insert("outer_grad_norm".into(), slope);
        report.flags.insert("outer_grad_norm_decreasing".into(), slope <= 0.0);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::inner_max::InnerTrace;
    use crate::predictor::PredictorArch;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn mse_trivial_cases() {
        // Constant-zero predictor on horizons of ones gives exactly 1.
        let mut w = DecisionModel::<f64>::new(2, 1, &[], PredictorArch::Mlp, 0).unwrap();
        w.set_params(vec![
            Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        ]);
        let ds = SequenceDataset::new(
            Tensor::matrix(3, 2, vec![0.3; 6]).unwrap(),
            Tensor::matrix(3, 1, vec![1.0; 3]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(mse_eval(&w, &ds).unwrap(), 1.0, epsilon = 1e-15);
        // A perfect predictor: horizon equals w·window with zero bias.
        let mut w2 = w.clone();
        w2.set_params(vec![
            Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        ]);
        let ds2 = SequenceDataset::new(
            Tensor::matrix(2, 2, vec![0.2, 0.3, 0.5, 0.1]).unwrap(),
            Tensor::matrix(2, 1, vec![0.5, 0.6]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(mse_eval(&w2, &ds2).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn mse_equals_mean_of_independent_per_sample_values() {
        let w = DecisionModel::<f64>::new(4, 2, &[5], PredictorArch::Mlp, 7).unwrap();
        let windows = crate::diffusion::normal_matrix(9, 4, &mut substream(0, 0));
        let horizons = crate::diffusion::normal_matrix(9, 2, &mut substream(0, 1));
        let ds = SequenceDataset::new(windows, horizons).unwrap();
        let total = mse_eval(&w, &ds).unwrap();
        let per = w.per_sample_losses(&ds).unwrap();
        let direct = per.iter().sum::<f64>() / per.len() as f64;
        assert_abs_diff_eq!(total, direct, epsilon = 1e-12);
    }

    #[test]
    fn wasserstein_basics() {
        assert_abs_diff_eq!(
            wasserstein1(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(wasserstein1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            wasserstein1(&[0.0, 1.0], &[0.5, 2.0]).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        assert!(wasserstein1::<f64>(&[], &[1.0]).is_err());
    }

    #[test]
    fn wasserstein_unequal_sizes_matches_quantile_integral() {
        // {0,1} vs {0.5}: F_a - F_b is 1/2 on [0, 0.5), -1/2 on [0.5, 1).
        let d = wasserstein1(&[0.0, 1.0], &[0.5]).unwrap();
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn wasserstein_metric_properties(
            a in proptest::collection::vec(-5.0..5.0f64, 1..8),
            b in proptest::collection::vec(-5.0..5.0f64, 1..8),
            c in proptest::collection::vec(-5.0..5.0f64, 1..8),
        ) {
            let dab = wasserstein1(&a, &b).unwrap();
            let dba = wasserstein1(&b, &a).unwrap();
            prop_assert!((dab - dba).abs() < 1e-12);
            prop_assert!(dab >= 0.0);
            let daa = wasserstein1(&a, &a).unwrap();
            prop_assert!(daa.abs() < 1e-15);
            let dac = wasserstein1(&a, &c).unwrap();
            let dcb = wasserstein1(&c, &b).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-12);
        }
    }

    #[test]
    fn gaussian_kl_reference_values() {
        assert_abs_diff_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(gaussian_kl(1.0, 1.0, 0.0, 1.0).unwrap(), 0.5);
        assert_abs_diff_eq!(
            gaussian_kl(0.0, 4.0, 0.0, 1.0).unwrap(),
            (4.0f64 - 1.0 - 4.0f64.ln()) / 2.0,
            epsilon = 1e-15
        );
        assert!(gaussian_kl(0.0, 0.0, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn gaussian_kl_non_negative(m1 in -3.0..3.0f64, v1 in 0.1..5.0f64,
                                    m2 in -3.0..3.0f64, v2 in 0.1..5.0f64) {
            let kl = gaussian_kl(m1, v1, m2, v2).unwrap();
            prop_assert!(kl >= -1e-12);
            if (m1 - m2).abs() < 1e-12 && (v1 - v2).abs() < 1e-12 {
                prop_assert!(kl.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn analytic_score_limits_and_linearity() {
        let sched = NoiseSchedule::<f64>::linear(50, 1e-9, 1e-9, 0.1, 5).unwrap();
        // ᾱ ≈ 1: the data score -(x - m0)/v0.
        let s = analytic_gaussian_score(1.5, 1, 2.0, 0.25, &sched);
        assert_abs_diff_eq!(s, -(1.5 - 2.0) / 0.25, epsilon = 1e-5);
        // Strong diffusion: ᾱ → 0 gives the prior score -x.
        let sched2 = NoiseSchedule::<f64>::linear(200, 0.2, 0.5, 0.1, 5).unwrap();
        let s2 = analytic_gaussian_score(0.7, 200, 2.0, 0.25, &sched2);
        assert_abs_diff_eq!(s2, -0.7, epsilon = 1e-6);
        // Linearity in x at fixed t.
        let sched3 = NoiseSchedule::<f64>::linear(30, 0.01, 0.3, 0.1, 5).unwrap();
        let f = |x: f64| analytic_gaussian_score(x, 11, 0.5, 2.0, &sched3);
        let (a, b, c) = (f(-1.0), f(0.0), f(1.0));
        assert_abs_diff_eq!(a + c, 2.0 * b, epsilon = 1e-12);
    }

    #[test]
    fn analytic_score_matches_log_density_finite_difference() {
        let sched = NoiseSchedule::<f64>::linear(40, 0.01, 0.3, 0.1, 5).unwrap();
        let (m0, v0) = (0.8, 1.7);
        let log_pdf = |x: f64, t: usize| {
            let ab = sched.alpha_bar_at(t);
            let mean = ab.sqrt() * m0;
            let var = ab * v0 + 1.0 - ab;
            -0.5 * (x - mean) * (x - mean) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
        };
        let h = 1e-6;
        for (x, t) in [(0.3, 1), (-1.2, 13), (2.4, 40)] {
            let fd = (log_pdf(x + h, t) - log_pdf(x - h, t)) / (2.0 * h);
            let s = analytic_gaussian_score(x, t, m0, v0, &sched);
            assert!((fd - s).abs() < 1e-6, "x={x}, t={t}: {fd} vs {s}");
        }
    }

    #[test]
    fn stationary_case_probe_quantities_are_small() {
        // P₀ = π = N(0,1) with the analytic score: the dsm excess, the
        // moment-fit KL and the forward KL all sit near zero.
        let sched = NoiseSchedule::<f64>::linear(50, 0.008, 0.25, 0.0, 0).unwrap();
        let model = AnalyticGaussianPredictor {
            m0: 0.0,
            v0: 1.0,
            sched: sched.clone(),
        };
        let step_set: Vec<usize> = (1..=15).collect();
        let report = lemma1_probe(
            &model,
            &sched,
            0.0,
            1.0,
            &step_set,
            4000,
            10_000,
            &mut substream(5, 0),
        )
        .unwrap();
        assert!(report.estimates["dsm_excess"].value.abs() < 0.02);
        assert!(report.estimates["kl_model_fit"].value < 0.02);
        assert!(report.estimates["kl_forward"].value < 0.02);
        assert!(report.flags["kl_model_fit_below_0.02"]);
    }

    #[test]
    fn spearman_and_slope_helpers() {
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]),
            1.0
        );
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]),
            -1.0
        );
        assert!(smoothed_slope(&[3.0, 2.0, 1.0, 0.5, 0.2, 0.1]) < 0.0);
        assert_abs_diff_eq!(smoothed_slope(&[2.0, 2.0, 2.0, 2.0]), 0.0);
    }

    #[test]
    fn convergence_probe_on_synthetic_traces() {
        // J_k = ε + 1/sqrt(k): violation should match the direct sum.
        let eps = 0.015;
        let k = 20;
        let j_values: Vec<f64> = (1..=k).map(|i| eps + 1.0 / (i as f64).sqrt()).collect();
        let direct = j_values.iter().map(|j| j - eps).sum::<f64>() / k as f64;
        let trace = InnerTrace {
            j_values,
            mu_values: vec![1.0; k],
            f_expectation: vec![],
            objective_values: vec![0.0; k],
            epsilon: eps,
        };
        let w = DecisionModel::<f64>::new(2, 1, &[], PredictorArch::Mlp, 0).unwrap();
        let result = RunResult {
            method: Method::Ddro,
            final_predictor: w,
            final_diffusion: None,
            predictor_iterates: vec![],
            selected_diffusion: vec![],
            selected_theta_indices: vec![],
            selected_w_index: None,
            outer_losses: vec![],
            grad_norms: vec![1.0, 0.8, 0.7, 0.6, 0.55, 0.53],
            inner_traces: vec![trace],
            dataset_seeds: vec![],
            epsilon_used: eps,
            reference_loss: 0.0,
        };
        let report = convergence_probe(&result).unwrap();
        assert_abs_diff_eq!(
            report.estimates["mean_constraint_violation"].value,
            direct,
            epsilon = 1e-12
        );
        assert!(report.flags["outer_grad_norm_decreasing"]);

        // Constant traces: zero slope, violation max{0, J-ε}.
        let trace2 = InnerTrace {
            j_values: vec![eps; 5],
            mu_values: vec![1.0; 5],
            f_expectation: vec![0.5; 5],
            objective_values: vec![0.0; 5],
            epsilon: eps,
        };
        let mut result2 = result;
        result2.inner_traces = vec![trace2];
        result2.grad_norms = vec![0.4; 6];
        let report2 = convergence_probe(&result2).unwrap();
        assert_abs_diff_eq!(
            report2.estimates["mean_constraint_violation"].value,
            0.0
        );
        assert_abs_diff_eq!(report2.slopes["inner_f_expectation"], 0.0);
        assert_abs_diff_eq!(report2.slopes["outer_grad_norm"], 0.0);
    }

    #[test]
    fn probe_rejects_traceless_runs() {
        let w = DecisionModel::<f64>::new(2, 1, &[], PredictorArch::Mlp, 0).unwrap();
        let result = RunResult {
            method: Method::Ml,
            final_predictor: w,
            final_diffusion: None,
            predictor_iterates: vec![],
            selected_diffusion: vec![],
            selected_theta_indices: vec![],
            selected_w_index: None,
            outer_losses: vec![],
            grad_norms: vec![],
            inner_traces: vec![],
            dataset_seeds: vec![],
            epsilon_used: 0.1,
            reference_loss: 0.0,
        };
        assert!(convergence_probe(&result).is_err());
    }
}
