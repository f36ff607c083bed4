//! Distributionally robust optimization with diffusion-model ambiguity sets.
//!
//! The crate layers as follows:
//!
//! * [`tensor`] — dense tensors, a static computation graph with
//!   reverse-mode differentiation, Adam, and seeded initialization;
//! * [`diffusion`] — DDPM mechanics: noise schedules, the closed-form
//!   forward perturbation, denoising score-matching loss, reverse Markov
//!   sampling and trajectory log-probabilities;
//! * [`inner_max`] — Lagrangian-relaxed adversarial fine-tuning of the
//!   diffusion model (policy-gradient and PPO surrogates, dual ascent);
//! * [`predictor`] / [`trainer`] — the sequence predictor and the outer
//!   gradient-descent-with-max-oracle training loop;
//! * [`baselines`] — plain ERM, diffusion-augmented ERM, Wasserstein-DRO
//!   via projected perturbation, and KL-DRO via exponential tilting;
//! * [`data`] — synthetic series, CSV ingestion, sliding windows and the
//!   Gaussian / Perlin / Cutout perturbation battery;
//! * [`metrics`] — evaluation metrics, distribution-shift measurement and
//!   the analytic-Gaussian verification probes;
//! * [`config`] / [`harness`] — declarative experiment configuration,
//!   end-to-end runs, result bundles and report emission.
//!
//! The numeric core is generic over the scalar type through
//! [`scalar::Real`]; the aliases below pin `f64`, which is what the
//! trainers, the CLI and every tolerance in the test suite use.

pub mod scalar;
pub mod tensor;
pub mod rng;

pub mod diffusion;
pub mod inner_max;
pub mod predictor;

pub mod baselines;
pub mod trainer;

pub mod data;
pub mod metrics;

pub mod config;
pub mod harness;

/// Default scalar for trainers, harness and CLI.
pub type Scalar = f64;

pub type Tensor = tensor::Tensor<Scalar>;
pub type Graph = tensor::Graph<Scalar>;
pub type AdamState = tensor::AdamState<Scalar>;
pub type NoiseSchedule = diffusion::NoiseSchedule<Scalar>;
pub type ScoreModel = diffusion::ScoreModel<Scalar>;
pub type Trajectory = diffusion::Trajectory<Scalar>;
pub type DualState = inner_max::DualState<Scalar>;
pub type DecisionModel = predictor::DecisionModel<Scalar>;
pub type Series = data::Series<Scalar>;
pub type SequenceSample = data::SequenceSample<Scalar>;
pub type SequenceDataset = data::SequenceDataset<Scalar>;
