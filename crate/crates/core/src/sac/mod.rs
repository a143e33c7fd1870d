//! Soft actor-critic: replay, twin critics with Polyak targets, and the
//! entropy-regularised actor update.

mod buffer;
mod losses;
mod trainer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpParams;

pub use buffer::{Batch, ReplayBuffer, Transition};
pub use losses::{
    actor_loss, actor_loss_graph, bootstrap_targets, draw_noise, critic_loss, critic_loss_graph,
    critic_td_target, min_q_graph, sample_next_actions, soft_update, ActorLossGraph,
};
pub use trainer::{
    evaluate_policy, run_training, train_sac, uniform_action, EpisodeRecord, EvalRecord, EvalSummary,
    TrainOutcome, TrainingLog, Unconstrained, UpdateRule,
};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacHyper {
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    /// Use `min(q1, q2)` backups; `false` trains and uses `q1` alone.
    pub twin_critics: bool,
    /// Drop the temperature on the `log pi` terms of the targets and of the
    /// critic-driven actor term, as the equations are literally printed.
    pub paper_literal_no_alpha: bool,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Number of evaluations in the convergence moving average.
    pub convergence_window: usize,
    /// Relative slack below the best moving average that still counts as
    /// converged.
    pub convergence_tolerance: f64,
    /// Early stopping is not considered before this many env steps.
    pub min_steps: usize,
    pub early_stop: bool,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.2,
            tau: 0.005,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            total_steps: 200_000,
            warmup_steps: 1_000,
            buffer_capacity: 100_000,
            hidden: vec![64, 64],
            twin_critics: true,
            paper_literal_no_alpha: false,
            eval_interval: 2_000,
            eval_episodes: 5,
            convergence_window: 20,
            convergence_tolerance: 0.05,
            min_steps: 0,
            early_stop: true,
        }
    }
}

impl SacHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("sac.{field}: {why}")));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in [0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau", "must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("actor_lr/critic_lr", "must be positive");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity", "must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs at least one non-empty layer");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        if self.convergence_window == 0 {
            return bad("convergence_window", "must be positive");
        }
        if !(self.convergence_tolerance >= 0.0) {
            return bad("convergence_tolerance", "must be non-negative");
        }
        Ok(())
    }

    /// Coefficient on `log pi` in targets and the critic-driven actor term.
    pub fn entropy_coef(&self) -> f64 {
        if self.paper_literal_no_alpha {
            1.0
        } else {
            self.alpha
        }
    }
}

/// Twin Q-networks `(s, a) -> q` with target copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub twin: bool,
}

impl CriticPair {
    pub fn init<R: Rng + ?Sized>(hidden: &[usize], twin: bool, rng: &mut R) -> Self {
        let mut sizes = vec![STATE_DIM + ACTION_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = MlpParams::init(&sizes, rng);
        let q2 = MlpParams::init(&sizes, rng);
        Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            twin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for net in [&self.q1, &self.q2, &self.q1_target, &self.q2_target] {
            net.validate()?;
            if net.output_size() != 1 || net.input_size() != STATE_DIM + ACTION_DIM {
                return Err(Error::Structural("critic must map (s, a) to a scalar".into()));
            }
        }
        let same = |a: &MlpParams, b: &MlpParams| {
            a.tensors().map(|t| t.shape()).eq(b.tensors().map(|t| t.shape()))
        };
        if !same(&self.q1, &self.q1_target) || !same(&self.q2, &self.q2_target) {
            return Err(Error::Structural("target shapes differ from online critics".into()));
        }
        Ok(())
    }
}
