//! Novelty constraints: an action is admissible for policy `i` only if its
//! density under every earlier policy `j` stays at or below `eps_j`.

mod library;
mod losses;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{gaussian_tanh_log_prob, gaussian_tanh_sample, GaussianTanhHead, PolicyParams};
use crate::tensor::Tensor;

pub use library::{
    build_library, entry_seed, evaluate_projected, extend_library, train_constrained_policy, Constrained,
    ConstrainedOutcome, LibraryEntry, PolicyLibrary, ProjectedEval, ProjectedPolicy, Provenance,
};
pub use losses::{
    constrained_actor_loss, constrained_actor_loss_graph, constrained_critic_target, ConstrainedActorGraph,
};

/// Loss on samples that violate a prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlBranch {
    /// `log pi_i(a) + log pi_j(a)`: lowers the prior's density at the
    /// sample while keeping the entropy push on `pi_i`.
    #[default]
    Repel,
    /// `log pi_i(a) - log pi_j(a)` as printed. Minimising it pulls `pi_i`
    /// toward the prior it violates.
    Printed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoveltyConfig {
    /// Quantile of the prior's mode densities used for its threshold.
    pub quantile: f64,
    /// Scale applied to that quantile.
    pub kappa: f64,
    pub max_attempts: usize,
    /// Return the least-violating candidate when attempts run out.
    pub fallback: bool,
    /// Replay states used to calibrate a new entry's threshold.
    pub calibration_states: usize,
    /// Behaviour actions over which the fallback rate is monitored.
    pub infeasible_window: usize,
    /// Abort training once the fallback rate over a full window exceeds this.
    pub infeasible_rate: f64,
    pub kl_branch: KlBranch,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        Self {
            quantile: 0.5,
            kappa: 0.1,
            max_attempts: 64,
            fallback: true,
            calibration_states: 1_000,
            infeasible_window: 10_000,
            infeasible_rate: 0.5,
            kl_branch: KlBranch::default(),
        }
    }
}

impl NoveltyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("novelty.{field}: {why}")));
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return bad("quantile", "must lie in (0, 1)");
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad("kappa", "must be finite and non-negative");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts", "must be at least 1");
        }
        if self.calibration_states == 0 {
            return bad("calibration_states", "must be positive");
        }
        if self.infeasible_window == 0 {
            return bad("infeasible_window", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.infeasible_rate) {
            return bad("infeasible_rate", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn rejection(&self) -> RejectionConfig {
        RejectionConfig {
            max_attempts: self.max_attempts,
            fallback: self.fallback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RejectionConfig {
    pub max_attempts: usize,
    pub fallback: bool,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        NoveltyConfig::default().rejection()
    }
}

/// A frozen earlier policy and its density threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct NoveltyConstraint {
    prior: PolicyParams,
    epsilon: f64,
    log_epsilon: f64,
}

impl NoveltyConstraint {
    /// `epsilon = 0` is accepted and rejects every action.
    pub fn new(prior: PolicyParams, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("threshold {epsilon} must be finite and non-negative")));
        }
        prior.validate()?;
        Ok(Self {
            prior,
            epsilon,
            log_epsilon: epsilon.ln(),
        })
    }

    /// Threshold given in log space, for thresholds beyond `f64` range.
    pub fn from_log_epsilon(prior: PolicyParams, log_epsilon: f64) -> Result<Self> {
        if log_epsilon.is_nan() || log_epsilon == f64::INFINITY {
            return Err(Error::Config(format!("log threshold {log_epsilon} is not usable")));
        }
        prior.validate()?;
        Ok(Self {
            prior,
            epsilon: log_epsilon.exp(),
            log_epsilon,
        })
    }

    pub fn prior(&self) -> &PolicyParams {
        &self.prior
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn log_epsilon(&self) -> f64 {
        self.log_epsilon
    }

    pub fn log_density(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(gaussian_tanh_log_prob(&self.prior.head(state)?, action))
    }
}

/// True iff `action` is admissible under every constraint at `state`.
pub fn novelty_indicator(state: &[f64], action: &[f64], constraints: &[NoveltyConstraint]) -> Result<bool> {
    for c in constraints {
        if c.log_density(state, action)? > c.log_epsilon {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionReport {
    /// Candidates drawn; 0 when an action was accepted without sampling.
    pub attempts: usize,
    pub fallback: bool,
    pub action: Vec<f64>,
    /// Log-density of `action` under the proposal.
    pub log_prob: f64,
    pub prior_log_densities: Vec<f64>,
}

impl RejectionReport {
    pub fn satisfies(&self, log_epsilons: &[f64]) -> bool {
        self.prior_log_densities
            .iter()
            .zip(log_epsilons)
            .all(|(ld, le)| ld <= le)
    }
}

/// A prior's head at one state, paired with its log threshold.
pub type PriorHead<'a> = (&'a GaussianTanhHead, f64);

fn prior_log_densities(priors: &[PriorHead<'_>], action: &[f64]) -> Vec<f64> {
    priors.iter().map(|(h, _)| gaussian_tanh_log_prob(h, action)).collect()
}

fn worst_margin(priors: &[PriorHead<'_>], densities: &[f64]) -> f64 {
    priors
        .iter()
        .zip(densities)
        .map(|((_, le), ld)| ld - le)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Draws from `propose` until a candidate is admissible under `priors`.
///
/// With fallback enabled, exhaustion returns the candidate whose largest
/// margin `log pi_j(a) - log eps_j` is smallest (earliest on ties).
pub fn rejection_sample_with(
    priors: &[PriorHead<'_>],
    cfg: RejectionConfig,
    mut propose: impl FnMut() -> Result<(Vec<f64>, f64)>,
) -> Result<RejectionReport> {
    if cfg.max_attempts == 0 {
        return Err(Error::Config("max_attempts must be at least 1".into()));
    }
    let mut best: Option<(f64, RejectionReport)> = None;
    for attempt in 1..=cfg.max_attempts {
        let (action, log_prob) = propose()?;
        let densities = prior_log_densities(priors, &action);
        let margin = worst_margin(priors, &densities);
        let report = RejectionReport {
            attempts: attempt,
            fallback: false,
            action,
            log_prob,
            prior_log_densities: densities,
        };
        if margin <= 0.0 {
            return Ok(report);
        }
        if best.as_ref().is_none_or(|(m, _)| margin < *m) {
            best = Some((margin, report));
        }
    }
    if !cfg.fallback {
        return Err(Error::ConstraintsInfeasible(format!(
            "no admissible action in {} attempts",
            cfg.max_attempts
        )));
    }
    let (_, mut report) = best.expect("at least one attempt");
    report.attempts = cfg.max_attempts;
    report.fallback = true;
    Ok(report)
}

pub(crate) fn standard_normals<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Samples the projected policy: draws from `head` subject to `priors`.
pub fn rejection_sample_head<R: Rng + ?Sized>(
    head: &GaussianTanhHead,
    priors: &[PriorHead<'_>],
    cfg: RejectionConfig,
    rng: &mut R,
) -> Result<RejectionReport> {
    rejection_sample_with(priors, cfg, || gaussian_tanh_sample(head, &standard_normals(head.dim(), rng)))
}

/// Samples `actor` at `state` subject to `constraints`.
pub fn rejection_sample<R: Rng + ?Sized>(
    actor: &PolicyParams,
    state: &[f64],
    constraints: &[NoveltyConstraint],
    cfg: RejectionConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, RejectionReport)> {
    let head = actor.head(state)?;
    let table = PriorTable::new(constraints, &Tensor::row(state))?;
    let report = rejection_sample_head(&head, &table.row(0), cfg, rng)?;
    Ok((report.action.clone(), report))
}

/// Every prior's head at every row of a state batch.
pub(crate) struct PriorTable {
    heads: Vec<Vec<GaussianTanhHead>>,
    log_eps: Vec<f64>,
}

impl PriorTable {
    pub(crate) fn new(constraints: &[NoveltyConstraint], states: &Tensor) -> Result<Self> {
        let heads = constraints
            .iter()
            .map(|c| c.prior.heads(states))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            log_eps: constraints.iter().map(|c| c.log_epsilon).collect(),
        })
    }

    pub(crate) fn row(&self, r: usize) -> Vec<PriorHead<'_>> {
        self.heads.iter().zip(&self.log_eps).map(|(h, &le)| (&h[r], le)).collect()
    }

    /// `[rows, d]` means and log-stds of prior `j`.
    pub(crate) fn tensors(&self, j: usize) -> Result<(Tensor, Tensor)> {
        let heads = &self.heads[j];
        let d = heads.first().map_or(0, |h| h.dim());
        let mean = heads.iter().flat_map(|h| h.mean.iter().copied()).collect();
        let log_std = heads.iter().flat_map(|h| h.log_std.iter().copied()).collect();
        Ok((Tensor::matrix(heads.len(), d, mean)?, Tensor::matrix(heads.len(), d, log_std)?))
    }
}

/// `kappa` times the `q`-quantile (linear interpolation between order
/// statistics) of the prior's density at its own mode over `states`.
pub fn calibrate_epsilon(prior: &PolicyParams, states: &[[f64; 2]], q: f64, kappa: f64) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Config("threshold calibration needs at least one state".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("quantile {q} outside (0, 1)")));
    }
    let flat = states.iter().flatten().copied().collect();
    let heads = prior.heads(&Tensor::matrix(states.len(), 2, flat)?)?;
    let mut densities: Vec<f64> = heads
        .iter()
        .map(|h| gaussian_tanh_log_prob(h, &h.mode_action()).exp())
        .collect();
    densities.sort_by(f64::total_cmp);
    let pos = q * (densities.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let quantile = densities[lo] + frac * (densities[hi] - densities[lo]);
    let eps = kappa * quantile;
    if !eps.is_finite() {
        return Err(Error::Numeric("calibrated threshold".into()));
    }
    Ok(eps)
}
