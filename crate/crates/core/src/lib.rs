//! Iterative novelty-constrained soft actor-critic.
//!
//! A library of policies is learned for one task: the first with plain SAC,
//! each later one restricted to actions whose density under every earlier
//! policy stays below a calibrated threshold. The extra policies then serve
//! as contingency behaviours in a backtracking recovery loop.

pub mod adam;
pub mod autodiff;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod novelty;
pub mod policy;
pub mod recovery;
pub mod rollout;
pub mod sac;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use env::{Corridor, Env, EnvConfig, EnvState, StepResult, WorldGeometry};
pub use error::{Error, Result};
pub use nn::MlpParams;
pub use novelty::{
    build_library, calibrate_epsilon, novelty_indicator, rejection_sample, NoveltyConfig, NoveltyConstraint,
    PolicyLibrary, ProjectedPolicy, RejectionConfig, RejectionReport,
};
pub use policy::{gaussian_tanh_log_prob, gaussian_tanh_sample, GaussianTanhHead, PolicyParams};
pub use recovery::{
    detect_contingency, run_with_random_recovery, run_with_recovery, Controller, RecoveryConfig, RecoveryTrace,
};
pub use rollout::{rollout, Rollout};
pub use sac::{train_sac, CriticPair, ReplayBuffer, SacHyper, TrainingLog, Transition};
pub use tensor::Tensor;
