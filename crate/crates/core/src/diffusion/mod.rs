//! DDPM mechanics: schedules, forward perturbation, denoising
//! score-matching loss, reverse Markov sampling and trajectory
//! log-probabilities.

mod loss;
mod model;
mod sampling;
mod schedule;

pub use loss::{
    draw_dsm_batch, dsm_loss, dsm_loss_node, eval_loss_node, traj_log_prob, DsmBatch,
    FrozenDsmTargets,
};
pub use model::{mlp_node, reverse_mean_batch, score_from_eps, NoisePredictor, ScoreModel};
pub use sampling::{forward_perturb, normal_matrix, reverse_sample, SampleBatch, Trajectory};
pub use schedule::NoiseSchedule;
