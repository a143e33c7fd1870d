use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    calibrate_epsilon, constrained_actor_loss_graph, constrained_critic_target, rejection_sample_head,
    rejection_sample_with, KlBranch, NoveltyConfig, NoveltyConstraint, PriorTable, RejectionConfig, RejectionReport,
};
use crate::autodiff::{Graph, Var};
use crate::env::{Corridor, Env, EnvConfig, WorldGeometry};
use crate::error::{Error, Result};
use crate::nn::MlpVars;
use crate::policy::{gaussian_tanh_log_prob, PolicyParams};
use crate::rollout::{majority_corridor, rollout, Rollout};
use crate::sac::{draw_noise, run_training, Batch, CriticPair, SacHyper, TrainOutcome, TrainingLog, UpdateRule};
use crate::tensor::Tensor;

/// An actor together with the constraints it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPolicy {
    pub actor: PolicyParams,
    pub constraints: Vec<NoveltyConstraint>,
}

impl ProjectedPolicy {
    pub fn unconstrained(actor: PolicyParams) -> Self {
        Self {
            actor,
            constraints: Vec::new(),
        }
    }

    pub fn log_epsilons(&self) -> Vec<f64> {
        self.constraints.iter().map(|c| c.log_epsilon()).collect()
    }

    /// Rejection-sampled action of the projected policy.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], cfg: RejectionConfig, rng: &mut R) -> Result<RejectionReport> {
        let head = self.actor.head(state)?;
        let table = PriorTable::new(&self.constraints, &Tensor::row(state))?;
        rejection_sample_head(&head, &table.row(0), cfg, rng)
    }

    /// `tanh(mean)` when it is admissible, otherwise a rejection-sampled
    /// action. Without constraints this is the plain greedy action and
    /// consumes no randomness.
    pub fn greedy<R: Rng + ?Sized>(&self, state: &[f64], cfg: RejectionConfig, rng: &mut R) -> Result<RejectionReport> {
        let head = self.actor.head(state)?;
        let mode = head.mode_action();
        let table = PriorTable::new(&self.constraints, &Tensor::row(state))?;
        let priors = table.row(0);
        let densities: Vec<f64> = priors.iter().map(|(h, _)| gaussian_tanh_log_prob(h, &mode)).collect();
        if priors.iter().zip(&densities).all(|((_, le), ld)| ld <= le) {
            return Ok(RejectionReport {
                attempts: 0,
                fallback: false,
                log_prob: gaussian_tanh_log_prob(&head, &mode),
                action: mode,
                prior_log_densities: densities,
            });
        }
        rejection_sample_head(&head, &priors, cfg, rng)
    }
}

/// Evaluation rollouts of a projected policy with per-action rejection
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEval {
    pub rollouts: Vec<Rollout>,
    pub reset_seeds: Vec<u64>,
    pub actions: usize,
    pub attempts: usize,
    pub fallbacks: usize,
    /// Executed actions above some prior's threshold.
    pub violations: usize,
}

impl ProjectedEval {
    pub fn success_rate(&self) -> f64 {
        if self.rollouts.is_empty() {
            return 0.0;
        }
        self.rollouts.iter().filter(|r| r.success).count() as f64 / self.rollouts.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        if self.rollouts.is_empty() {
            return 0.0;
        }
        self.rollouts.iter().map(Rollout::episode_return).sum::<f64>() / self.rollouts.len() as f64
    }

    pub fn corridors(&self, geometry: &WorldGeometry) -> Vec<Option<Corridor>> {
        self.rollouts.iter().map(|r| r.corridor(geometry)).collect()
    }

    pub fn corridor_counts(&self, geometry: &WorldGeometry) -> [usize; 3] {
        let mut counts = [0; 3];
        for c in self.corridors(geometry).into_iter().flatten() {
            counts[c.index()] += 1;
        }
        counts
    }

    pub fn majority_corridor(&self, geometry: &WorldGeometry) -> Option<Corridor> {
        majority_corridor(&self.corridors(geometry))
    }

    pub fn mean_attempts(&self) -> f64 {
        if self.actions == 0 {
            0.0
        } else {
            self.attempts as f64 / self.actions as f64
        }
    }

    pub fn satisfaction_rate(&self) -> f64 {
        if self.actions == 0 {
            1.0
        } else {
            1.0 - self.violations as f64 / self.actions as f64
        }
    }
}

/// Runs `episodes` rollouts of `policy.greedy`, reset seeds drawn from
/// `seed`.
pub fn evaluate_projected(
    env: &Env,
    policy: &ProjectedPolicy,
    episodes: usize,
    seed: u64,
    cfg: RejectionConfig,
) -> Result<ProjectedEval> {
    let mut env = env.clone();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    seeds.set_stream(4);
    let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
    act_rng.set_stream(6);
    let log_eps = policy.log_epsilons();
    let mut out = ProjectedEval {
        rollouts: Vec::with_capacity(episodes),
        reset_seeds: Vec::with_capacity(episodes),
        actions: 0,
        attempts: 0,
        fallbacks: 0,
        violations: 0,
    };
    for _ in 0..episodes {
        let reset_seed: u64 = seeds.random();
        let mut stats = (0, 0, 0, 0);
        let r = rollout(&mut env, reset_seed, |s| {
            let rep = policy.greedy(&s, cfg, &mut act_rng)?;
            stats.0 += 1;
            stats.1 += rep.attempts;
            stats.2 += usize::from(rep.fallback);
            stats.3 += usize::from(!rep.satisfies(&log_eps));
            Ok([rep.action[0], rep.action[1]])
        })?;
        out.actions += stats.0;
        out.attempts += stats.1;
        out.fallbacks += stats.2;
        out.violations += stats.3;
        out.rollouts.push(r);
        out.reset_seeds.push(reset_seed);
    }
    Ok(out)
}

/// Update rule for a policy trained under novelty constraints. With no
/// constraints it consumes randomness exactly as plain SAC does.
#[derive(Debug, Clone)]
pub struct Constrained {
    policy_constraints: Vec<NoveltyConstraint>,
    cfg: RejectionConfig,
    window: usize,
    max_rate: f64,
    kl_branch: KlBranch,
    recent: VecDeque<bool>,
    recent_fallbacks: usize,
    episode: Counts,
    total: Counts,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    actions: usize,
    attempts: usize,
    fallbacks: usize,
}

impl Counts {
    fn rates(&self) -> (f64, f64) {
        if self.actions == 0 {
            return (0.0, 0.0);
        }
        let n = self.actions as f64;
        (self.attempts as f64 / n, self.fallbacks as f64 / n)
    }
}

impl Constrained {
    pub fn new(constraints: Vec<NoveltyConstraint>, cfg: &NoveltyConfig) -> Self {
        Self {
            policy_constraints: constraints,
            cfg: cfg.rejection(),
            window: cfg.infeasible_window,
            max_rate: cfg.infeasible_rate,
            kl_branch: cfg.kl_branch,
            recent: VecDeque::new(),
            recent_fallbacks: 0,
            episode: Counts::default(),
            total: Counts::default(),
        }
    }

    pub fn constraints(&self) -> &[NoveltyConstraint] {
        &self.policy_constraints
    }

    /// Mean attempts and fallback rate over every behaviour action so far.
    pub fn totals(&self) -> (f64, f64) {
        self.total.rates()
    }

    fn record(&mut self, report: &RejectionReport) -> Result<()> {
        for c in [&mut self.episode, &mut self.total] {
            c.actions += 1;
            c.attempts += report.attempts;
            c.fallbacks += usize::from(report.fallback);
        }
        self.recent.push_back(report.fallback);
        self.recent_fallbacks += usize::from(report.fallback);
        if self.recent.len() > self.window && self.recent.pop_front() == Some(true) {
            self.recent_fallbacks -= 1;
        }
        if self.recent.len() == self.window {
            let rate = self.recent_fallbacks as f64 / self.window as f64;
            if rate > self.max_rate {
                return Err(Error::ConstraintsInfeasible(format!(
                    "fallback used for {:.1}% of the last {} behaviour actions",
                    100.0 * rate,
                    self.window
                )));
            }
        }
        Ok(())
    }

    fn priors_at(&self, state: [f64; 2]) -> Result<PriorTable> {
        PriorTable::new(&self.policy_constraints, &Tensor::row(&state))
    }
}

impl UpdateRule for Constrained {
    fn warmup_action(&mut self, state: [f64; 2], rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let table = self.priors_at(state)?;
        let report = rejection_sample_with(&table.row(0), self.cfg, || {
            Ok((crate::sac::uniform_action(rng).to_vec(), 0.0))
        })?;
        self.record(&report)?;
        Ok([report.action[0], report.action[1]])
    }

    fn behavior_action(&mut self, actor: &PolicyParams, state: [f64; 2], rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let head = actor.head(&state)?;
        let table = self.priors_at(state)?;
        let report = rejection_sample_head(&head, &table.row(0), self.cfg, rng)?;
        self.record(&report)?;
        Ok([report.action[0], report.action[1]])
    }

    fn eval_action(&mut self, actor: &PolicyParams, state: [f64; 2], rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let policy = ProjectedPolicy {
            actor: actor.clone(),
            constraints: self.policy_constraints.clone(),
        };
        let report = policy.greedy(&state, self.cfg, rng)?;
        Ok([report.action[0], report.action[1]])
    }

    fn td_targets(
        &mut self,
        batch: &Batch,
        actor: &PolicyParams,
        critics: &CriticPair,
        hyper: &SacHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        constrained_critic_target(batch, actor, critics, &self.policy_constraints, hyper, self.cfg, rng)
    }

    fn actor_loss(
        &mut self,
        g: &mut Graph,
        actor: &PolicyParams,
        actor_vars: &MlpVars,
        critics: &CriticPair,
        batch: &Batch,
        hyper: &SacHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, f64)> {
        let noise = draw_noise(batch.len(), actor.action_dim, rng);
        let out = constrained_actor_loss_graph(
            g,
            actor,
            actor_vars,
            critics,
            &self.policy_constraints,
            &batch.states,
            &noise,
            hyper,
            self.kl_branch,
        )?;
        let lp = g.value(out.sampled.log_prob).data();
        let entropy = -lp.iter().sum::<f64>() / lp.len() as f64;
        Ok((out.loss, entropy))
    }

    fn take_episode_stats(&mut self) -> Option<(f64, f64)> {
        let rates = self.episode.rates();
        self.episode = Counts::default();
        (!self.policy_constraints.is_empty()).then_some(rates)
    }
}

#[derive(Debug, Clone)]
pub struct ConstrainedOutcome {
    pub outcome: TrainOutcome,
    pub mean_attempts: f64,
    pub fallback_rate: f64,
}

/// Trains the next library entry under constraints from every existing
/// entry. With an empty library this is plain SAC.
pub fn train_constrained_policy(
    env: &Env,
    library: &PolicyLibrary,
    hyper: &SacHyper,
    novelty: &NoveltyConfig,
    seed: u64,
) -> Result<ConstrainedOutcome> {
    novelty.validate()?;
    let mut rule = Constrained::new(library.constraints(library.len())?, novelty);
    let outcome = run_training(env, hyper, seed, &mut rule)?;
    let (mean_attempts, fallback_rate) = rule.totals();
    Ok(ConstrainedOutcome {
        outcome,
        mean_attempts,
        fallback_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub env_fingerprint: String,
    /// Number of earlier entries this one was constrained by.
    pub constrained_by: usize,
    pub steps: usize,
    pub converged_at: Option<usize>,
    pub mean_attempts: f64,
    pub fallback_rate: f64,
    pub final_eval_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub actor: PolicyParams,
    pub critics: CriticPair,
    /// Threshold applied when this entry constrains later ones.
    pub epsilon: f64,
    pub provenance: Provenance,
}

/// Ordered policies for one task; entry `i` was trained under constraints
/// from entries `0..i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyLibrary {
    pub format: String,
    pub version: u32,
    pub env: EnvConfig,
    pub env_fingerprint: String,
    pub hyper: SacHyper,
    pub novelty: NoveltyConfig,
    /// Hash of the run configuration that produced the library, if any.
    #[serde(default)]
    pub config_hash: String,
    pub entries: Vec<LibraryEntry>,
}

impl PolicyLibrary {
    pub const FORMAT: &'static str = "novelty-sac/library";
    pub const VERSION: u32 = 1;

    pub fn new(env: &EnvConfig, hyper: &SacHyper, novelty: &NoveltyConfig) -> Result<Self> {
        Ok(Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            env_fingerprint: WorldGeometry::from_config(env)?.fingerprint(),
            env: env.clone(),
            hyper: hyper.clone(),
            novelty: novelty.clone(),
            config_hash: String::new(),
            entries: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Constraints contributed by entries `0..i`.
    pub fn constraints(&self, i: usize) -> Result<Vec<NoveltyConstraint>> {
        if i > self.entries.len() {
            return Err(Error::Config(format!("library has {} entries, asked for {i}", self.entries.len())));
        }
        self.entries[..i]
            .iter()
            .map(|e| NoveltyConstraint::new(e.actor.clone(), e.epsilon))
            .collect()
    }

    /// Entry `i` with the constraints it was trained under.
    pub fn projected(&self, i: usize) -> Result<ProjectedPolicy> {
        let entry = self
            .entries
            .get(i)
            .ok_or_else(|| Error::Config(format!("no policy {i} in a library of {}", self.entries.len())))?;
        Ok(ProjectedPolicy {
            actor: entry.actor.clone(),
            constraints: self.constraints(i)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("library serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lib: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("line {}: {e}", e.line())))?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != Self::FORMAT || self.version != Self::VERSION {
            return Err(Error::Parse(format!(
                "expected {} v{}, found {} v{}",
                Self::FORMAT,
                Self::VERSION,
                self.format,
                self.version
            )));
        }
        if WorldGeometry::from_config(&self.env)?.fingerprint() != self.env_fingerprint {
            return Err(Error::Parse("environment fingerprint does not match its config".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            e.actor.validate()?;
            e.critics.validate()?;
            if !(e.epsilon >= 0.0 && e.epsilon.is_finite()) {
                return Err(Error::Parse(format!("entry {i}: threshold {} is invalid", e.epsilon)));
            }
            if e.provenance.constrained_by != i {
                return Err(Error::Parse(format!(
                    "entry {i} records {} priors",
                    e.provenance.constrained_by
                )));
            }
        }
        Ok(())
    }
}

/// Seed for library entry `index`; entry 0 uses `seed` itself.
pub fn entry_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Trains one more entry and calibrates its threshold from replay states.
pub fn extend_library(library: &mut PolicyLibrary, env: &Env, seed: u64) -> Result<TrainingLog> {
    if WorldGeometry::from_config(env.config())?.fingerprint() != library.env_fingerprint {
        return Err(Error::Config("environment differs from the library's".into()));
    }
    let index = library.len();
    let entry_seed = entry_seed(seed, index);
    let trained = train_constrained_policy(env, library, &library.hyper, &library.novelty, entry_seed)?;
    let TrainOutcome {
        actor,
        critics,
        buffer,
        log,
    } = trained.outcome;

    let n = library.novelty.calibration_states.min(buffer.len());
    let states: Vec<[f64; 2]> = (0..n).map(|k| buffer.get(k * buffer.len() / n).s).collect();
    let epsilon = calibrate_epsilon(&actor, &states, library.novelty.quantile, library.novelty.kappa)?;

    library.entries.push(LibraryEntry {
        actor,
        critics,
        epsilon,
        provenance: Provenance {
            seed: entry_seed,
            env_fingerprint: library.env_fingerprint.clone(),
            constrained_by: index,
            steps: log.steps,
            converged_at: log.converged_at,
            mean_attempts: trained.mean_attempts,
            fallback_rate: trained.fallback_rate,
            final_eval_return: log.evals.last().map(|e| e.mean_return),
        },
    });
    Ok(log)
}

/// Trains `n_policies` entries in sequence.
pub fn build_library(
    env: &Env,
    n_policies: usize,
    hyper: &SacHyper,
    novelty: &NoveltyConfig,
    seed: u64,
) -> Result<PolicyLibrary> {
    if n_policies == 0 {
        return Err(Error::Config("a library needs at least one policy".into()));
    }
    let mut library = PolicyLibrary::new(env.config(), hyper, novelty)?;
    for _ in 0..n_policies {
        extend_library(&mut library, env, seed)?;
    }
    Ok(library)
}
