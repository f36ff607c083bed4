//! Noise-predictor networks.
//!
//! The reverse chain only needs one thing from a model: ε̂(x, t), the
//! predicted injected noise for a batch of states at given steps. The
//! [`NoisePredictor`] trait captures that, so the learned network and the
//! closed-form probes plug into the same sampler.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensor::{init_params, Bindings, Graph, NodeId, Tensor, TensorError};

use super::schedule::NoiseSchedule;

/// Batched noise prediction: `x` is `[n, d]`, `ts[i]` is the step of row i.
pub trait NoisePredictor<T: Real> {
    fn dim(&self) -> usize;
    fn predict_eps(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, TensorError>;
}

/// Fully-connected ε̂_θ(x, t) with a sinusoidal step embedding.
///
/// The derived quantities follow the ε-parameterization:
/// score s_θ(x,t) = -ε̂_θ(x,t)/sqrt(1-ᾱ_t) and reverse mean
/// μ_θ(x_t,t) = (x_t - (β_t/sqrt(1-ᾱ_t)) ε̂_θ(x_t,t)) / sqrt(α_t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel<T> {
    dim: usize,
    hidden: Vec<usize>,
    embed_dim: usize,
    params: Vec<Tensor<T>>,
}

impl<T: Real> ScoreModel<T> {
    pub fn new(
        dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self, TensorError> {
        if dim == 0 {
            return Err(TensorError::Invalid("model dimension must be positive".into()));
        }
        if embed_dim == 0 || embed_dim % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "embedding width must be positive and even, got {embed_dim}"
            )));
        }
        let mut spec = vec![dim + embed_dim];
        spec.extend_from_slice(hidden);
        spec.push(dim);
        let params = init_params(&spec, seed)?;
        Ok(Self {
            dim,
            hidden: hidden.to_vec(),
            embed_dim,
            params,
        })
    }

    /// All-zero parameters, so ε̂ ≡ 0. Handy for deterministic-chain tests.
    pub fn zeroed(dim: usize, hidden: &[usize], embed_dim: usize) -> Result<Self, TensorError> {
        let mut m = Self::new(dim, hidden, embed_dim, 0)?;
        for p in &mut m.params {
            for v in p.data_mut() {
                *v = T::zero();
            }
        }
        Ok(m)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
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

    /// Sinusoidal features of the integer step: pairs
    /// (sin(t·ω_i), cos(t·ω_i)) with geometrically spaced frequencies.
    pub fn embed_steps(&self, ts: &[usize]) -> Tensor<T> {
        let e = self.embed_dim;
        let half = e / 2;
        let mut data = Vec::with_capacity(ts.len() * e);
        for &t in ts {
            let tf = t as f64;
            for i in 0..half {
                let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
                let ang = tf * freq;
                data.push(T::cast(ang.sin()));
                data.push(T::cast(ang.cos()));
            }
        }
        Tensor::from_parts_unchecked(vec![ts.len(), e], data)
    }

    /// Canonical parameter input names for graph construction.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.params.len() / 2)
            .flat_map(|l| [format!("{prefix}_w{l}"), format!("{prefix}_b{l}")])
            .collect()
    }

    /// Declare this model's parameters as named graph inputs.
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

    /// Bind this model's parameter tensors under the canonical names.
    pub fn bind_params<'a>(&'a self, prefix: &str, bindings: &mut Bindings<'a, T>) {
        for (name, p) in self.param_names(prefix).into_iter().zip(&self.params) {
            bindings.insert(name, p);
        }
    }

    /// Append the ε̂ computation for `[n, d]` states and `[n, e]` embeddings;
    /// `params` are node ids from [`ScoreModel::declare_params`] (or
    /// constants for a frozen model).
    pub fn eps_node(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        emb: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        let joined = g.concat(x, emb, 1)?;
        mlp_node(g, joined, params)
    }

    /// Frozen-parameter variant: parameters enter as constants, so no
    /// gradient flows into this model.
    pub fn eps_node_frozen(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        emb: NodeId,
    ) -> Result<NodeId, TensorError> {
        let ids: Vec<NodeId> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        self.eps_node(g, x, emb, &ids)
    }
}

/// Tanh-activated fully-connected stack over interleaved (weight, bias)
/// parameter nodes; the final layer stays linear.
pub fn mlp_node<T: Real>(
    g: &mut Graph<T>,
    input: NodeId,
    params: &[NodeId],
) -> Result<NodeId, TensorError> {
    debug_assert!(params.len() >= 2 && params.len() % 2 == 0);
    let layers = params.len() / 2;
    let rows = g.shape_of(input)[0];
    let mut h = input;
    for l in 0..layers {
        let w = params[2 * l];
        let b = params[2 * l + 1];
        let z = g.matmul(h, w)?;
        let cols = g.shape_of(z)[1];
        let bb = g.broadcast(b, &[rows, cols])?;
        h = g.add(z, bb)?;
        if l + 1 < layers {
            h = g.tanh(h);
        }
    }
    Ok(h)
}

impl<T: Real> NoisePredictor<T> for ScoreModel<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, TensorError> {
        let n = x.shape()[0];
        debug_assert_eq!(ts.len(), n);
        let mut g = Graph::new();
        let xin = g.input("x", x.shape())?;
        let ein = g.input("emb", &[n, self.embed_dim])?;
        let pids = self.declare_params(&mut g, "sm")?;
        let out = self.eps_node(&mut g, xin, ein, &pids)?;
        let emb = self.embed_steps(ts);
        let mut bindings: Bindings<'_, T> = BTreeMap::new();
        bindings.insert("x".into(), x);
        bindings.insert("emb".into(), &emb);
        self.bind_params("sm", &mut bindings);
        let eval = g.forward(&bindings)?;
        Ok(eval.value(out).clone())
    }
}

/// Score/ε correspondence and reverse mean, shared by sampling and probes.
pub fn score_from_eps<T: Real>(eps: T, t: usize, sched: &NoiseSchedule<T>) -> T {
    -eps / (T::one() - sched.alpha_bar_at(t)).sqrt()
}

/// μ_θ for a batch of states and a single step.
pub fn reverse_mean_batch<T: Real>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Tensor<T> {
    let coeff = sched.beta_at(t) / (T::one() - sched.alpha_bar_at(t)).sqrt();
    let inv_sqrt_alpha = T::one() / sched.alpha_at(t).sqrt();
    x_t.zip_map(eps, move |x, e| (x - coeff * e) * inv_sqrt_alpha)
}
