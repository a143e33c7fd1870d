//! Contingency recovery: when the optimal policy stops making progress,
//! try each contingency policy for `m` steps followed by the optimal
//! policy again; if none succeeds, restore an earlier checkpoint of the
//! original trajectory and repeat.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{Error, Result};
use crate::novelty::{PolicyLibrary, ProjectedPolicy, RejectionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    /// Checkpoint stride along the original trajectory, in steps.
    pub k: usize,
    /// Length of each contingency segment.
    pub m: usize,
    pub stuck_threshold: f64,
    /// Consecutive small moves that count as being stuck.
    pub stuck_window: usize,
    pub max_rounds: usize,
    /// Total environment steps across all segments of one run.
    pub step_cap: usize,
    /// Resume the optimal policy with its mean action rather than sampling.
    pub greedy_resume: bool,
    pub rejection_attempts: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            k: 10,
            m: 30,
            stuck_threshold: 0.005,
            stuck_window: 5,
            max_rounds: 20,
            step_cap: 2_000,
            greedy_resume: true,
            rejection_attempts: 64,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("recovery.{field}: {why}")));
        if self.k == 0 {
            return bad("k", "must be at least 1");
        }
        if !(self.stuck_threshold > 0.0) {
            return bad("stuck_threshold", "must be positive");
        }
        if self.stuck_window == 0 {
            return bad("stuck_window", "must be at least 1");
        }
        if self.step_cap == 0 {
            return bad("step_cap", "must be positive");
        }
        if self.rejection_attempts == 0 {
            return bad("rejection_attempts", "must be at least 1");
        }
        Ok(())
    }

    fn rejection(&self) -> RejectionConfig {
        RejectionConfig {
            max_attempts: self.rejection_attempts,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    pub position: [f64; 2],
    pub steps_elapsed: usize,
    /// Index into the original trajectory.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    Optimal,
    /// Library entry with this 1-based number.
    Contingency(usize),
    Random,
    /// A checkpoint restore; the row holds the restored position.
    Backtrack,
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Controller::Optimal => f.write_str("optimal"),
            Controller::Contingency(j) => write!(f, "contingency_{j}"),
            Controller::Random => f.write_str("random"),
            Controller::Backtrack => f.write_str("backtrack"),
        }
    }
}

impl FromStr for Controller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(Controller::Optimal),
            "random" => Ok(Controller::Random),
            "backtrack" => Ok(Controller::Backtrack),
            _ => s
                .strip_prefix("contingency_")
                .and_then(|j| j.parse().ok())
                .map(Controller::Contingency)
                .ok_or_else(|| Error::Parse(format!("unknown controller `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Goal,
    StepCap,
    CheckpointsExhausted,
    RoundsExceeded,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Goal => "goal",
            Termination::StepCap => "step_cap",
            Termination::CheckpointsExhausted => "checkpoints_exhausted",
            Termination::RoundsExceeded => "rounds_exceeded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub position: [f64; 2],
    pub controller: Controller,
    pub round: usize,
}

/// Row 0 is the reset position; every later row is one environment step or
/// one checkpoint restore.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryTrace {
    pub steps: Vec<TraceStep>,
    pub success: bool,
    pub rounds: usize,
    pub termination: Termination,
}

impl RecoveryTrace {
    pub const HEADER: &'static str = "step,x,y,controller,round";

    pub fn positions(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.steps.iter().map(|s| s.position)
    }

    /// Number of environment steps taken (restores excluded).
    pub fn env_steps(&self) -> usize {
        self.steps[1..]
            .iter()
            .filter(|s| s.controller != Controller::Backtrack)
            .count()
    }

    pub fn to_delimited(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                s.position[0], s.position[1], s.controller, s.round
            ));
        }
        out
    }

    /// Parses rows written by [`RecoveryTrace::to_delimited`]; `#` lines
    /// are skipped. Outcome fields are not part of the text and come back
    /// as a failed run with zero rounds.
    pub fn parse_rows(text: &str) -> Result<Vec<TraceStep>> {
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != Self::HEADER {
                    return Err(Error::Parse(format!("line {}: expected header `{}`", n + 1, Self::HEADER)));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let err = |what: &str| Error::Parse(format!("line {}: {what}", n + 1));
            if fields.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            rows.push(TraceStep {
                position: [num(fields[1])?, num(fields[2])?],
                controller: fields[3].parse().map_err(|_| err("bad controller"))?,
                round: fields[4].parse().map_err(|_| err("bad round"))?,
            });
        }
        if !header_seen {
            return Err(Error::Parse("missing header".into()));
        }
        Ok(rows)
    }
}

/// True iff the last `window.len() - 1` moves were all shorter than
/// `threshold`. Windows with fewer than two positions are never stuck.
pub fn detect_contingency(window: &[[f64; 2]], threshold: f64) -> bool {
    window.len() >= 2
        && window
            .windows(2)
            .all(|p| (p[1][0] - p[0][0]).hypot(p[1][1] - p[0][1]) < threshold)
}

/// What runs during a contingency segment.
#[derive(Debug, Clone, Copy)]
enum Fallback<'a> {
    Policy(usize, &'a ProjectedPolicy),
    Random,
}

enum Outcome {
    Goal,
    Stuck,
    /// The environment's own step cap ended the attempt.
    Truncated,
    /// The run's total step budget is spent.
    Budget,
    Completed,
}

struct Runner<'a> {
    env: Env,
    cfg: &'a RecoveryConfig,
    optimal: &'a ProjectedPolicy,
    steps: Vec<TraceStep>,
    taken: usize,
    round: usize,
    rng: ChaCha8Rng,
}

impl Runner<'_> {
    fn step(&mut self, controller: Controller, action: [f64; 2]) -> Outcome {
        let res = self.env.step(&action);
        self.taken += 1;
        self.steps.push(TraceStep {
            position: res.next_state.position,
            controller,
            round: self.round,
        });
        if res.reached_goal {
            Outcome::Goal
        } else if res.terminal {
            Outcome::Truncated
        } else if self.taken >= self.cfg.step_cap {
            Outcome::Budget
        } else {
            Outcome::Completed
        }
    }

    fn optimal_action(&mut self) -> Result<[f64; 2]> {
        let state = self.env.state().position;
        let report = if self.cfg.greedy_resume {
            self.optimal.greedy(&state, self.cfg.rejection(), &mut self.rng)?
        } else {
            self.optimal.sample(&state, self.cfg.rejection(), &mut self.rng)?
        };
        Ok([report.action[0], report.action[1]])
    }

    /// Runs the optimal policy until goal, stuck, or a cap. Records
    /// checkpoints when `record` is given.
    fn run_optimal(&mut self, mut record: Option<&mut Vec<Checkpoint>>) -> Result<Outcome> {
        let w = self.cfg.stuck_window;
        let mut window = vec![self.env.state().position];
        let mut index = 0;
        loop {
            if let Some(cps) = record.as_deref_mut() {
                if index % self.cfg.k == 0 {
                    let s = self.env.state();
                    cps.push(Checkpoint {
                        position: s.position,
                        steps_elapsed: s.steps_elapsed,
                        index,
                    });
                }
            }
            let action = self.optimal_action()?;
            let outcome = self.step(Controller::Optimal, action);
            index += 1;
            if !matches!(outcome, Outcome::Completed) {
                return Ok(outcome);
            }
            window.push(self.env.state().position);
            if window.len() > w + 1 {
                window.remove(0);
            }
            if window.len() == w + 1 && detect_contingency(&window, self.cfg.stuck_threshold) {
                return Ok(Outcome::Stuck);
            }
        }
    }

    fn run_fallback(&mut self, fallback: Fallback<'_>) -> Result<Outcome> {
        for _ in 0..self.cfg.m {
            let state = self.env.state().position;
            let (controller, action) = match fallback {
                Fallback::Policy(j, policy) => {
                    let r = policy.greedy(&state, self.cfg.rejection(), &mut self.rng)?;
                    (Controller::Contingency(j), [r.action[0], r.action[1]])
                }
                Fallback::Random => (
                    Controller::Random,
                    [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)],
                ),
            };
            let outcome = self.step(controller, action);
            if !matches!(outcome, Outcome::Completed) {
                return Ok(outcome);
            }
        }
        Ok(Outcome::Completed)
    }

    fn restore(&mut self, cp: &Checkpoint) -> Result<()> {
        self.env.set_state(cp.position, cp.steps_elapsed)?;
        self.steps.push(TraceStep {
            position: cp.position,
            controller: Controller::Backtrack,
            round: self.round,
        });
        Ok(())
    }

    fn finish(self, termination: Termination) -> RecoveryTrace {
        RecoveryTrace {
            steps: self.steps,
            success: termination == Termination::Goal,
            rounds: self.round,
            termination,
        }
    }
}

fn recover(
    env: &Env,
    optimal: &ProjectedPolicy,
    fallbacks: &[Fallback<'_>],
    cfg: &RecoveryConfig,
    seed: u64,
) -> Result<RecoveryTrace> {
    cfg.validate()?;
    let mut env = env.clone();
    let start = env.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut run = Runner {
        env,
        cfg,
        optimal,
        steps: vec![TraceStep {
            position: start.position,
            controller: Controller::Optimal,
            round: 0,
        }],
        taken: 0,
        round: 0,
        rng,
    };

    let mut checkpoints = Vec::new();
    match run.run_optimal(Some(&mut checkpoints))? {
        Outcome::Goal => return Ok(run.finish(Termination::Goal)),
        Outcome::Stuck => {}
        _ => return Ok(run.finish(Termination::StepCap)),
    }

    let s = run.env.state();
    let stuck_index = run.taken;
    let mut anchor = Checkpoint {
        position: s.position,
        steps_elapsed: s.steps_elapsed,
        index: stuck_index,
    };
    let mut next = checkpoints.iter().rposition(|c| c.index + cfg.k <= stuck_index);
    let mut at_anchor = true;
    loop {
        if run.round == cfg.max_rounds {
            return Ok(run.finish(Termination::RoundsExceeded));
        }
        run.round += 1;
        for &fallback in fallbacks {
            if !at_anchor {
                run.restore(&anchor)?;
            }
            at_anchor = false;
            match run.run_fallback(fallback)? {
                Outcome::Goal => return Ok(run.finish(Termination::Goal)),
                Outcome::Budget => return Ok(run.finish(Termination::StepCap)),
                Outcome::Truncated => continue,
                _ => {}
            }
            match run.run_optimal(None)? {
                Outcome::Goal => return Ok(run.finish(Termination::Goal)),
                Outcome::Budget => return Ok(run.finish(Termination::StepCap)),
                _ => {}
            }
        }
        let Some(ci) = next else {
            return Ok(run.finish(Termination::CheckpointsExhausted));
        };
        anchor = checkpoints[ci];
        next = ci.checked_sub(1);
        run.restore(&anchor)?;
        at_anchor = true;
    }
}

/// Recovery with library entries `2..` as contingency policies, tried in
/// library order and executed under their own novelty constraints.
pub fn run_with_recovery(env: &Env, library: &PolicyLibrary, cfg: &RecoveryConfig, seed: u64) -> Result<RecoveryTrace> {
    if library.len() < 2 {
        return Err(Error::Config(format!(
            "recovery needs at least two library entries, found {}",
            library.len()
        )));
    }
    let policies = (0..library.len())
        .map(|i| library.projected(i))
        .collect::<Result<Vec<_>>>()?;
    run_with_policies(env, &policies, cfg, seed)
}

/// As [`run_with_recovery`] with explicit policies; `policies[0]` is the
/// optimal one.
pub fn run_with_policies(env: &Env, policies: &[ProjectedPolicy], cfg: &RecoveryConfig, seed: u64) -> Result<RecoveryTrace> {
    if policies.len() < 2 {
        return Err(Error::Config("recovery needs at least one contingency policy".into()));
    }
    let fallbacks: Vec<Fallback<'_>> = policies[1..]
        .iter()
        .enumerate()
        .map(|(i, p)| Fallback::Policy(i + 2, p))
        .collect();
    recover(env, &policies[0], &fallbacks, cfg, seed)
}

/// The same loop with uniform random actions in place of contingency
/// policies.
pub fn run_with_random_recovery(
    env: &Env,
    optimal: &ProjectedPolicy,
    cfg: &RecoveryConfig,
    seed: u64,
) -> Result<RecoveryTrace> {
    recover(env, optimal, &[Fallback::Random], cfg, seed)
}
