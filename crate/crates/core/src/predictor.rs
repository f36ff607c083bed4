//! Sequence predictor (the decision variable of the outer problem).
//!
//! Default architecture is a fully-connected network on the flattened
//! input window; a minimal single-layer recurrent cell is available for
//! parity with stacked-recurrent setups without committing to full-scale
//! training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::rng::substream;
use crate::scalar::{kahan_sum, Real};
use crate::tensor::{init_params, Bindings, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorArch {
    Mlp,
    Recurrent,
}

/// Parameterized predictor mapping a length-`window` input to a
/// length-`horizon` forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionModel<T> {
    window: usize,
    horizon: usize,
    hidden: Vec<usize>,
    arch: PredictorArch,
    params: Vec<Tensor<T>>,
}

impl<T: Real> DecisionModel<T> {
    pub fn new(
        window: usize,
        horizon: usize,
        hidden: &[usize],
        arch: PredictorArch,
        seed: u64,
    ) -> Result<Self, TensorError> {
        if window == 0 || horizon == 0 {
            return Err(TensorError::Invalid(
                "window and horizon must be positive".into(),
            ));
        }
        let params = match arch {
            PredictorArch::Mlp => {
                let mut spec = vec![window];
                spec.extend_from_slice(hidden);
                spec.push(horizon);
                init_params(&spec, seed)?
            }
            PredictorArch::Recurrent => {
                let h = match hidden {
                    [h] if *h > 0 => *h,
                    _ => {
                        return Err(TensorError::Invalid(
                            "recurrent predictor takes exactly one hidden width".into(),
                        ))
                    }
                };
                let mut rng = substream(seed, 0);
                let mut normal = |rows: usize, cols: usize, scale: f64| {
                    let data: Vec<T> = (0..rows * cols)
                        .map(|_| T::standard_normal(&mut rng) * T::cast(scale))
                        .collect();
                    Tensor::from_parts_unchecked(vec![rows, cols], data)
                };
                let wx = normal(1, h, 1.0);
                let wh = normal(h, h, 1.0 / (h as f64).sqrt());
                let wo = normal(h, horizon, 1.0 / (h as f64).sqrt());
                vec![
                    wx,
                    wh,
                    Tensor::zeros(&[1, h]),
                    wo,
                    Tensor::zeros(&[1, horizon]),
                ]
            }
        };
        Ok(Self {
            window,
            horizon,
            hidden: hidden.to_vec(),
            arch,
            params,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon
    }

    pub fn arch(&self) -> PredictorArch {
        self.arch
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<Tensor<T>> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor<T>>) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.params.len())
            .map(|i| format!("{prefix}_p{i}"))
            .collect()
    }

    pub fn declare_params(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
    ) -> Result<Vec<NodeId>, TensorError> {
        self.param_names(prefix)
            .iter()
            .zip(&self.params)
            .map(|(name, p)| g.input(name, p.shape()))
            .collect()
    }

    pub fn bind_params<'a>(&'a self, prefix: &str, bindings: &mut Bindings<'a, T>) {
        for (name, p) in self.param_names(prefix).into_iter().zip(&self.params) {
            bindings.insert(name, p);
        }
    }

    /// Append the forecast computation for a `[B, window]` node.
    pub fn predict_node(
        &self,
        g: &mut Graph<T>,
        windows: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        match self.arch {
            PredictorArch::Mlp => crate::diffusion::mlp_node(g, windows, params),
            PredictorArch::Recurrent => {
                let rows = g.shape_of(windows)[0];
                let h = self.hidden[0];
                let (wx, wh, bh, wo, bo) = (params[0], params[1], params[2], params[3], params[4]);
                let mut state = g.constant(Tensor::zeros(&[rows, h]));
                for t in 0..self.window {
                    let xt = g.slice(windows, 1, t, 1)?;
                    let zx = g.matmul(xt, wx)?;
                    let zh = g.matmul(state, wh)?;
                    let z = g.add(zx, zh)?;
                    let bb = g.broadcast(bh, &[rows, h])?;
                    let z = g.add(z, bb)?;
                    state = g.tanh(z);
                }
                let out = g.matmul(state, wo)?;
                let bb = g.broadcast(bo, &[rows, self.horizon])?;
                g.add(out, bb)
            }
        }
    }

    /// Batched forecast for `[B, window]` inputs.
    pub fn predict(&self, windows: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut g = Graph::new();
        let win = g.input("win", windows.shape())?;
        let params = self.declare_params(&mut g, "pd")?;
        let out = self.predict_node(&mut g, win, &params)?;
        let mut bindings: Bindings<'_, T> = BTreeMap::new();
        bindings.insert("win".into(), windows);
        self.bind_params("pd", &mut bindings);
        let eval = g.forward(&bindings)?;
        Ok(eval.value(out).clone())
    }

    /// Per-sample squared-error losses `‖predict(window) - horizon‖²/L_out`.
    pub fn per_sample_losses(&self, data: &SequenceDataset<T>) -> Result<Vec<T>, TensorError> {
        let preds = self.predict(data.windows())?;
        let l_out = self.horizon;
        let denom = T::from_usize(l_out).unwrap();
        Ok((0..data.len())
            .map(|i| {
                let p = preds.row(i);
                let h = data.horizons().row(i);
                kahan_sum((0..l_out).map(|j| {
                    let r = p[j] - h[j];
                    r * r
                })) / denom
            })
            .collect())
    }

    /// f(w, x) for one generated `(window ‖ horizon)` vector.
    pub fn generated_sample_loss(&self, x: &[T]) -> Result<T, TensorError> {
        if x.len() != self.window + self.horizon {
            return Err(TensorError::Invalid(format!(
                "generated vector has {} entries, predictor expects {}",
                x.len(),
                self.window + self.horizon
            )));
        }
        let win = Tensor::from_parts_unchecked(vec![1, self.window], x[..self.window].to_vec());
        let pred = self.predict(&win)?;
        let denom = T::from_usize(self.horizon).unwrap();
        Ok(kahan_sum((0..self.horizon).map(|j| {
            let r = pred.data()[j] - x[self.window + j];
            r * r
        })) / denom)
    }
}

/// A built training objective over a fixed batch: mean squared prediction
/// error, evaluated and differentiated at arbitrary parameters.
pub struct PredictionProblem<T> {
    graph: Graph<T>,
    loss: NodeId,
    param_names: Vec<String>,
    feeds: Vec<(String, Tensor<T>)>,
}

impl<T: Real> PredictionProblem<T> {
    /// Mean over the batch of `‖predict(window) - horizon‖²/L_out`.
    pub fn new(model: &DecisionModel<T>, batch: &SequenceDataset<T>) -> Result<Self, TensorError> {
        if batch.is_empty() {
            return Err(TensorError::Invalid("empty batch".into()));
        }
        let mut g = Graph::new();
        let win = g.input("win", batch.windows().shape())?;
        let hor = g.input("hor", batch.horizons().shape())?;
        let params = model.declare_params(&mut g, "pd")?;
        let pred = model.predict_node(&mut g, win, &params)?;
        let resid = g.sub(pred, hor)?;
        let sq = g.square(resid);
        // Global mean over B·L_out entries equals the batch mean of
        // per-sample ‖·‖²/L_out.
        let loss = g.mean(sq);
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

    fn bindings<'a>(&'a self, params: &'a [Tensor<T>]) -> Bindings<'a, T> {
        let mut b: Bindings<'a, T> = BTreeMap::new();
        for (name, p) in self.param_names.iter().zip(params) {
            b.insert(name.clone(), p);
        }
        for (name, t) in &self.feeds {
            b.insert(name.clone(), t);
        }
        b
    }

    /// Batch-mean loss.
    pub fn loss(&self, params: &[Tensor<T>]) -> Result<T, TensorError> {
        let eval = self.graph.forward(&self.bindings(params))?;
        Ok(eval.value(self.loss).item())
    }

    /// Loss and parameter gradients.
    pub fn loss_and_gradient(
        &self,
        params: &[Tensor<T>],
    ) -> Result<(T, Vec<Tensor<T>>), TensorError> {
        let eval = self.graph.forward(&self.bindings(params))?;
        let value = eval.value(self.loss).item();
        let grads = self.graph.backward(&eval, self.loss)?;
        let out = self
            .param_names
            .iter()
            .map(|name| self.graph.grad_of_input(&grads, name))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((value, out))
    }

    /// Loss, parameter gradients, and the gradient w.r.t. the window
    /// inputs (for input-space adversaries).
    pub fn loss_gradient_with_inputs(
        &self,
        params: &[Tensor<T>],
    ) -> Result<(T, Vec<Tensor<T>>, Tensor<T>), TensorError> {
        let eval = self.graph.forward(&self.bindings(params))?;
        let value = eval.value(self.loss).item();
        let grads = self.graph.backward(&eval, self.loss)?;
        let out = self
            .param_names
            .iter()
            .map(|name| self.graph.grad_of_input(&grads, name))
            .collect::<Result<Vec<_>, _>>()?;
        let win = self.graph.grad_of_input(&grads, "win")?;
        Ok((value, out, win))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, windowize, SynthSpec};

    fn toy_dataset(l_in: usize, l_out: usize) -> SequenceDataset<f64> {
        let spec = SynthSpec {
            length: 80,
            periods: vec![12.0],
            amplitudes: vec![1.0],
            phases: vec![],
            trend: 0.01,
            level: 0.0,
            innovation_sigma: 0.02,
            regime: None,
        };
        let s = synth_generate(&spec, 3).unwrap();
        SequenceDataset::from_samples(&windowize(&s, l_in, l_out, 1).unwrap()).unwrap()
    }

    #[test]
    fn mlp_prediction_shape_and_determinism() {
        let m = DecisionModel::<f64>::new(8, 2, &[16], PredictorArch::Mlp, 1).unwrap();
        let ds = toy_dataset(8, 2);
        let a = m.predict(ds.windows()).unwrap();
        let b = m.predict(ds.windows()).unwrap();
        assert_eq!(a.shape(), &[ds.len(), 2]);
        assert_eq!(a, b);
    }

    #[test]
    fn recurrent_prediction_shape() {
        let m = DecisionModel::<f64>::new(8, 1, &[6], PredictorArch::Recurrent, 1).unwrap();
        let ds = toy_dataset(8, 1);
        let out = m.predict(ds.windows()).unwrap();
        assert_eq!(out.shape(), &[ds.len(), 1]);
        assert!(DecisionModel::<f64>::new(8, 1, &[6, 6], PredictorArch::Recurrent, 1).is_err());
    }

    #[test]
    fn batch_loss_equals_mean_of_per_sample_losses() {
        let m = DecisionModel::<f64>::new(8, 2, &[10], PredictorArch::Mlp, 5).unwrap();
        let ds = toy_dataset(8, 2);
        let problem = PredictionProblem::new(&m, &ds).unwrap();
        let batch = problem.loss(m.params()).unwrap();
        let per = m.per_sample_losses(&ds).unwrap();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((batch - mean).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_both_archs() {
        for arch in [PredictorArch::Mlp, PredictorArch::Recurrent] {
            let m = DecisionModel::<f64>::new(6, 1, &[5], arch, 9).unwrap();
            let ds = toy_dataset(6, 1).subset(&[0, 3, 11, 20]);
            let problem = PredictionProblem::new(&m, &ds).unwrap();
            let (_, grads) = problem.loss_and_gradient(m.params()).unwrap();
            let h = 1e-6;
            for (pi, grad) in grads.iter().enumerate() {
                for j in 0..grad.len() {
                    let mut plus = m.params().to_vec();
                    plus[pi].data_mut()[j] += h;
                    let mut minus = m.params().to_vec();
                    minus[pi].data_mut()[j] -= h;
                    let fd = (problem.loss(&plus).unwrap() - problem.loss(&minus).unwrap())
                        / (2.0 * h);
                    let ad = grad.data()[j];
                    let tol = 1e-5 * ad.abs().max(fd.abs()).max(1e-3);
                    assert!((ad - fd).abs() < tol, "{arch:?} param {pi}[{j}]: {ad} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn generated_sample_loss_matches_per_sample_route() {
        let m = DecisionModel::<f64>::new(8, 2, &[10], PredictorArch::Mlp, 5).unwrap();
        let ds = toy_dataset(8, 2);
        let per = m.per_sample_losses(&ds).unwrap();
        let joined = ds.joined();
        for i in [0usize, 5, 17] {
            let f = m.generated_sample_loss(joined.row(i)).unwrap();
            assert!((f - per[i]).abs() < 1e-12);
        }
    }
}
