use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{actor_loss_graph, critic_loss_graph, critic_td_target, draw_noise, soft_update};
use super::{Batch, CriticPair, ReplayBuffer, SacHyper, Transition, ACTION_DIM, STATE_DIM};
use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::autodiff::{Graph, Var};
use crate::env::{Corridor, Env};
use crate::error::{Error, Result};
use crate::nn::MlpVars;
use crate::policy::{gaussian_tanh_sample, PolicyParams, ACTION_LIMIT};
use crate::rollout::{majority_corridor, rollout};
use crate::tensor::Tensor;

/// Seeded stream `stream` of a run.
pub(crate) fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform_action<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [
        rng.random_range(-ACTION_LIMIT..ACTION_LIMIT),
        rng.random_range(-ACTION_LIMIT..ACTION_LIMIT),
    ]
}

/// The pieces of a SAC-style learner that differ between the plain and the
/// constrained algorithm. The loop in [`run_training`] owns everything else.
pub trait UpdateRule {
    fn warmup_action(&mut self, state: [f64; 2], rng: &mut ChaCha8Rng) -> Result<[f64; 2]>;

    fn behavior_action(
        &mut self,
        actor: &PolicyParams,
        state: [f64; 2],
        rng: &mut ChaCha8Rng,
    ) -> Result<[f64; 2]>;

    fn eval_action(&mut self, actor: &PolicyParams, state: [f64; 2], rng: &mut ChaCha8Rng) -> Result<[f64; 2]>;

    fn td_targets(
        &mut self,
        batch: &Batch,
        actor: &PolicyParams,
        critics: &CriticPair,
        hyper: &SacHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>>;

    /// Records the actor objective on `g`; returns the loss and the batch
    /// entropy estimate `-mean log pi`.
    #[allow(clippy::too_many_arguments)]
    fn actor_loss(
        &mut self,
        g: &mut Graph,
        actor: &PolicyParams,
        actor_vars: &MlpVars,
        critics: &CriticPair,
        batch: &Batch,
        hyper: &SacHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, f64)>;

    /// Mean rejection attempts and fallback rate of behaviour actions since
    /// the last call, if the rule samples under constraints.
    fn take_episode_stats(&mut self) -> Option<(f64, f64)> {
        None
    }
}

/// Plain SAC.
#[derive(Debug, Default, Clone, Copy)]
pub struct Unconstrained;

impl UpdateRule for Unconstrained {
    fn warmup_action(&mut self, _state: [f64; 2], rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        Ok(uniform_action(rng))
    }

    fn behavior_action(
        &mut self,
        actor: &PolicyParams,
        state: [f64; 2],
        rng: &mut ChaCha8Rng,
    ) -> Result<[f64; 2]> {
        let head = actor.head(&state)?;
        let noise = draw_noise(1, ACTION_DIM, rng);
        let (a, _) = gaussian_tanh_sample(&head, noise.data())?;
        Ok([a[0], a[1]])
    }

    fn eval_action(&mut self, actor: &PolicyParams, state: [f64; 2], _rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let a = actor.head(&state)?.mode_action();
        Ok([a[0], a[1]])
    }

    fn td_targets(
        &mut self,
        batch: &Batch,
        actor: &PolicyParams,
        critics: &CriticPair,
        hyper: &SacHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        critic_td_target(batch, actor, critics, hyper, rng)
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
        let out = actor_loss_graph(g, actor, actor_vars, critics, &batch.states, &noise, hyper)?;
        let lp = g.value(out.sampled.log_prob).data();
        let entropy = -lp.iter().sum::<f64>() / lp.len() as f64;
        Ok((out.loss, entropy))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub env_step: usize,
    pub episode: usize,
    pub episode_return: f64,
    pub length: usize,
    /// Means over the gradient steps taken during the episode; `None`
    /// before the first update.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub mean_attempts: Option<f64>,
    pub fallback_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub env_step: usize,
    pub index: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    pub evals: Vec<EvalRecord>,
    pub converged_at: Option<usize>,
    pub steps: usize,
}

impl TrainingLog {
    pub const HEADER: &'static str = "kind,env_step,index,return,length,critic_loss,actor_loss,entropy,mean_attempts,fallback_rate,success_rate";

    /// Comma-delimited text, episodes and evaluations interleaved by step.
    pub fn to_delimited(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::new();
        out.push_str("# novelty-sac training log v1\n");
        out.push_str(Self::HEADER);
        out.push('\n');
        let mut evals = self.evals.iter().peekable();
        for ep in &self.episodes {
            while let Some(ev) = evals.next_if(|ev| ev.env_step <= ep.env_step) {
                write_eval(&mut out, ev);
            }
            let _ = writeln!(
                out,
                "episode,{},{},{},{},{},{},{},{},{},",
                ep.env_step,
                ep.episode,
                ep.episode_return,
                ep.length,
                opt(ep.critic_loss),
                opt(ep.actor_loss),
                opt(ep.entropy),
                opt(ep.mean_attempts),
                opt(ep.fallback_rate),
            );
        }
        for ev in evals {
            write_eval(&mut out, ev);
        }
        let _ = writeln!(
            out,
            "# steps={} converged_at={}",
            self.steps,
            self.converged_at.map(|s| s.to_string()).unwrap_or_else(|| "none".into())
        );
        out
    }
}

fn write_eval(out: &mut String, ev: &EvalRecord) {
    let _ = writeln!(
        out,
        "eval,{},{},{},{},,,,,,{}",
        ev.env_step, ev.index, ev.mean_return, ev.mean_length, ev.success_rate
    );
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub actor: PolicyParams,
    pub critics: CriticPair,
    pub buffer: ReplayBuffer,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub successes: Vec<bool>,
    pub corridors: Vec<Option<Corridor>>,
}

impl EvalSummary {
    pub fn mean_return(&self) -> f64 {
        mean(&self.returns)
    }

    pub fn success_rate(&self) -> f64 {
        if self.successes.is_empty() {
            return 0.0;
        }
        self.successes.iter().filter(|&&s| s).count() as f64 / self.successes.len() as f64
    }

    pub fn majority_corridor(&self) -> Option<Corridor> {
        majority_corridor(&self.corridors)
    }

    pub fn corridor_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for c in self.corridors.iter().flatten() {
            counts[c.index()] += 1;
        }
        counts
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs `episodes` evaluation rollouts with reset seeds drawn from `rng`.
pub fn evaluate_policy(
    env: &Env,
    episodes: usize,
    rng: &mut ChaCha8Rng,
    mut act: impl FnMut([f64; 2], &mut ChaCha8Rng) -> Result<[f64; 2]>,
) -> Result<EvalSummary> {
    let mut env = env.clone();
    let mut summary = EvalSummary {
        returns: Vec::new(),
        lengths: Vec::new(),
        successes: Vec::new(),
        corridors: Vec::new(),
    };
    for _ in 0..episodes {
        let seed: u64 = rng.random();
        let mut action_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = rollout(&mut env, seed, |s| act(s, &mut action_rng))?;
        summary.returns.push(r.episode_return());
        summary.lengths.push(r.len());
        summary.successes.push(r.success);
        summary.corridors.push(r.corridor(env.geometry()));
    }
    Ok(summary)
}

fn convergence_reached(evals: &[EvalRecord], hyper: &SacHyper) -> bool {
    let w = hyper.convergence_window;
    if evals.len() < w {
        return false;
    }
    let recent: Vec<f64> = evals[evals.len() - w..].iter().map(|e| e.mean_return).collect();
    let avg = mean(&recent);
    let best = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = hyper.convergence_tolerance;
    let first: Vec<f64> = evals[..w].iter().map(|e| e.mean_return).collect();
    let baseline = mean(&first);
    // A flat window at the starting level is not convergence.
    avg >= best - tol * best.abs() && avg > baseline + tol * baseline.abs()
}

/// Plain SAC on `env`. Same loop as the constrained learner with the
/// [`Unconstrained`] rule.
pub fn train_sac(env: &Env, hyper: &SacHyper, seed: u64) -> Result<TrainOutcome> {
    run_training(env, hyper, seed, &mut Unconstrained)
}

/// Environment-step / gradient-step loop: one gradient step per env step
/// after warm-up, periodic evaluation, optional early stop.
pub fn run_training<U: UpdateRule>(env: &Env, hyper: &SacHyper, seed: u64, rule: &mut U) -> Result<TrainOutcome> {
    hyper.validate()?;
    let mut init_rng = run_rng(seed, 0);
    let mut env_rng = run_rng(seed, 1);
    let mut act_rng = run_rng(seed, 2);
    let mut upd_rng = run_rng(seed, 3);
    let mut eval_rng = run_rng(seed, 4);

    let mut actor = PolicyParams::init(STATE_DIM, ACTION_DIM, &hyper.hidden, &mut init_rng);
    let mut critics = CriticPair::init(&hyper.hidden, hyper.twin_critics, &mut init_rng);
    let mut actor_opt = AdamState::new(actor.net.tensors());
    let mut critic_opt = AdamState::new(critics.q1.tensors().chain(critics.q2.tensors()));
    let actor_adam = AdamConfig::with_lr(hyper.actor_lr);
    let critic_adam = AdamConfig::with_lr(hyper.critic_lr);

    let mut env = env.clone();
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity);
    let mut log = TrainingLog::default();

    let mut state = env.reset(env_rng.random());
    let mut ep_return = 0.0;
    let mut ep_len = 0usize;
    let mut ep_losses = LossAccumulator::default();

    for step in 0..hyper.total_steps {
        let action = if step < hyper.warmup_steps {
            rule.warmup_action(state.position, &mut act_rng)?
        } else {
            rule.behavior_action(&actor, state.position, &mut act_rng)?
        };
        let res = env.step(&action);
        buffer.push(Transition {
            s: state.position,
            a: action,
            r: res.reward,
            s_next: res.next_state.position,
            done: res.reached_goal,
        });
        ep_return += res.reward;
        ep_len += 1;

        if step >= hyper.warmup_steps && buffer.len() >= hyper.batch_size {
            let (cl, al, ent) = gradient_step(
                &mut actor,
                &mut critics,
                &mut actor_opt,
                &mut critic_opt,
                (&actor_adam, &critic_adam),
                &buffer,
                hyper,
                rule,
                &mut upd_rng,
            )
            .map_err(|e| match e {
                Error::Numeric(detail) => Error::Divergence { step, detail },
                other => other,
            })?;
            ep_losses.add(cl, al, ent);
        }

        if res.terminal {
            let stats = rule.take_episode_stats();
            let (critic_loss, actor_loss, entropy) = ep_losses.take();
            log.episodes.push(EpisodeRecord {
                env_step: step + 1,
                episode: log.episodes.len(),
                episode_return: ep_return,
                length: ep_len,
                critic_loss,
                actor_loss,
                entropy,
                mean_attempts: stats.map(|s| s.0),
                fallback_rate: stats.map(|s| s.1),
            });
            state = env.reset(env_rng.random());
            ep_return = 0.0;
            ep_len = 0;
        } else {
            state = res.next_state;
        }

        if (step + 1) % hyper.eval_interval == 0 && hyper.eval_episodes > 0 {
            let summary = evaluate_policy(&env, hyper.eval_episodes, &mut eval_rng, |s, r| {
                rule.eval_action(&actor, s, r)
            })?;
            log.evals.push(EvalRecord {
                env_step: step + 1,
                index: log.evals.len(),
                mean_return: summary.mean_return(),
                mean_length: summary.lengths.iter().sum::<usize>() as f64 / summary.lengths.len() as f64,
                success_rate: summary.success_rate(),
            });
            if hyper.early_stop && step + 1 >= hyper.min_steps && convergence_reached(&log.evals, hyper) {
                log.converged_at = Some(step + 1);
                log.steps = step + 1;
                break;
            }
        }
        log.steps = step + 1;
    }

    Ok(TrainOutcome {
        actor,
        critics,
        buffer,
        log,
    })
}

#[derive(Default)]
struct LossAccumulator {
    n: usize,
    critic: f64,
    actor: f64,
    entropy: f64,
}

impl LossAccumulator {
    fn add(&mut self, c: f64, a: f64, e: f64) {
        self.n += 1;
        self.critic += c;
        self.actor += a;
        self.entropy += e;
    }

    fn take(&mut self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let out = if self.n == 0 {
            (None, None, None)
        } else {
            let n = self.n as f64;
            (Some(self.critic / n), Some(self.actor / n), Some(self.entropy / n))
        };
        *self = Self::default();
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn gradient_step<U: UpdateRule>(
    actor: &mut PolicyParams,
    critics: &mut CriticPair,
    actor_opt: &mut AdamState,
    critic_opt: &mut AdamState,
    (actor_adam, critic_adam): (&AdamConfig, &AdamConfig),
    buffer: &ReplayBuffer,
    hyper: &SacHyper,
    rule: &mut U,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let batch = buffer.sample(hyper.batch_size, rng);
    let targets = rule.td_targets(&batch, actor, critics, hyper, rng)?;

    let critic_loss = {
        let mut g = Graph::new();
        let q1 = critics.q1.bind(&mut g, true);
        let q2 = critics.q2.bind(&mut g, critics.twin);
        let loss = critic_loss_graph(&mut g, &q1, critics.twin.then_some(&q2), &batch, &targets)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric("critic loss".into()));
        }
        let grads = g.backward(loss)?;
        critics.q1.store_grads(&q1, &grads)?;
        critics.q2.store_grads(&q2, &grads)?;
        let mut params: Vec<&mut Tensor> = critics.q1.tensors_mut().chain(critics.q2.tensors_mut()).collect();
        adam_step(&mut params, critic_opt, critic_adam)?;
        value
    };

    let (actor_loss, entropy) = {
        let mut g = Graph::new();
        let vars = actor.net.bind(&mut g, true);
        let (loss, entropy) = rule.actor_loss(&mut g, actor, &vars, critics, &batch, hyper, rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric("actor loss".into()));
        }
        let grads = g.backward(loss)?;
        actor.net.store_grads(&vars, &grads)?;
        let mut params: Vec<&mut Tensor> = actor.net.tensors_mut().collect();
        adam_step(&mut params, actor_opt, actor_adam)?;
        (value, entropy)
    };

    soft_update(critics, hyper.tau);
    Ok((critic_loss, actor_loss, entropy))
}
