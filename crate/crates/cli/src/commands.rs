use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use novelty_sac::env::GeometryExport;
use novelty_sac::novelty::{evaluate_projected, extend_library, ProjectedEval, RejectionConfig};
use novelty_sac::recovery::Termination;
use novelty_sac::rollout::rollout;
use novelty_sac::{
    run_with_random_recovery, run_with_recovery, Controller, Corridor, Env, Error, PolicyLibrary, RecoveryTrace,
};
use rand::SeedableRng;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::plot::{render_svg, Segment};
use crate::trajectory::{TrajectoryFile, TrajectoryHeader};

const TRACE_MAGIC: &str = "# novelty-sac recovery trace v1";

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, contents).map_err(CliError::io(path))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

pub fn load_library(path: &Path) -> Result<PolicyLibrary> {
    PolicyLibrary::from_json(&read(path)?).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn controller_tag(index: usize) -> String {
    if index == 0 {
        Controller::Optimal.to_string()
    } else {
        Controller::Contingency(index + 1).to_string()
    }
}

fn corridor_name(c: Option<Corridor>) -> &'static str {
    c.map(Corridor::name).unwrap_or("none")
}

/// Metrics for one library entry's evaluation rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub corridor_counts: [usize; 3],
    pub majority: Option<Corridor>,
    pub constrained: bool,
    pub actions: usize,
    pub mean_attempts: f64,
    pub fallbacks: usize,
    pub violations: usize,
    pub satisfaction_rate: f64,
}

impl EvalReport {
    fn new(policy: usize, constrained: bool, ev: &ProjectedEval, env: &Env) -> Self {
        Self {
            policy,
            episodes: ev.rollouts.len(),
            success_rate: ev.success_rate(),
            mean_return: ev.mean_return(),
            corridor_counts: ev.corridor_counts(env.geometry()),
            majority: ev.majority_corridor(env.geometry()),
            constrained,
            actions: ev.actions,
            mean_attempts: ev.mean_attempts(),
            fallbacks: ev.fallbacks,
            violations: ev.violations,
            satisfaction_rate: ev.satisfaction_rate(),
        }
    }

    /// Episodes whose corridor differs from `other`.
    pub fn episodes_outside(&self, other: Corridor) -> usize {
        self.corridor_counts.iter().sum::<usize>() - self.corridor_counts[other.index()]
    }

    pub fn to_text(&self) -> String {
        let [l, m, r] = self.corridor_counts;
        let mut out = format!(
            "policy={}\nepisodes={}\nsuccess_rate={:.4}\nmean_return={:.4}\ncorridors=left:{l};middle:{m};right:{r}\nmajority_corridor={}\n",
            self.policy,
            self.episodes,
            self.success_rate,
            self.mean_return,
            corridor_name(self.majority)
        );
        if self.constrained {
            let _ = write!(
                out,
                "actions={}\nmean_attempts={:.4}\nfallbacks={}\nviolations={}\nconstraint_satisfaction={:.6}\n",
                self.actions, self.mean_attempts, self.fallbacks, self.violations, self.satisfaction_rate
            );
        }
        out
    }
}

fn evaluate_entry(
    cfg: &RunConfig,
    library: &PolicyLibrary,
    env: &Env,
    index: usize,
    episodes: usize,
    seed: u64,
    rejection: RejectionConfig,
) -> Result<(EvalReport, TrajectoryFile)> {
    let policy = library.projected(index)?;
    let ev = evaluate_projected(env, &policy, episodes, seed, rejection)?;
    let header = TrajectoryHeader {
        config_hash: cfg.hash(),
        env_fingerprint: library.env_fingerprint.clone(),
        policy: index,
        seed,
        blockades: Vec::new(),
    };
    let file = TrajectoryFile::from_rollouts(header, &ev.rollouts, &controller_tag(index));
    Ok((EvalReport::new(index, index > 0, &ev, env), file))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub config_hash: String,
    pub entries: Vec<EvalReport>,
    /// Why the library holds fewer entries than requested, if it does.
    pub stopped: Option<String>,
    /// Wall-clock training time per entry. Not written to any file.
    pub train_seconds: Vec<f64>,
}

impl TrainSummary {
    pub fn majorities(&self) -> Vec<Option<Corridor>> {
        self.entries.iter().map(|e| e.majority).collect()
    }

    pub fn pairwise_distinct(&self) -> bool {
        let m = self.majorities();
        m.iter().all(Option::is_some)
            && m.iter().enumerate().all(|(i, a)| m[i + 1..].iter().all(|b| a != b))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# config_hash={}\nentries={}\n", self.config_hash, self.entries.len());
        let majorities: Vec<&str> = self.majorities().into_iter().map(corridor_name).collect();
        let _ = writeln!(out, "majority_corridors={}", majorities.join(","));
        let _ = writeln!(out, "pairwise_distinct={}", self.pairwise_distinct());
        if let Some(why) = &self.stopped {
            let _ = writeln!(out, "stopped={why}");
        }
        for e in &self.entries {
            let _ = writeln!(out, "\n[policy {}]", e.policy);
            out.push_str(&e.to_text());
        }
        out
    }
}

/// Trains `cfg.n_policies` entries into `cfg.out_dir`, writing the library
/// after each one. Infeasible constraints end the library early and are
/// reported in the summary.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let hash = cfg.hash();
    let env = Env::new(cfg.env.clone())?;
    write(&out.join("config.toml"), &cfg.canonical_toml())?;
    write(&out.join("geometry.json"), &GeometryExport::from_env(&env).to_json())?;

    let mut library = PolicyLibrary::new(&cfg.env, &cfg.sac, &cfg.novelty)?;
    library.config_hash = hash.clone();
    let rejection = RejectionConfig {
        max_attempts: cfg.eval.max_attempts,
        fallback: cfg.eval.fallback,
    };
    let mut summary = TrainSummary {
        config_hash: hash.clone(),
        entries: Vec::new(),
        stopped: None,
        train_seconds: Vec::new(),
    };
    for i in 0..cfg.n_policies {
        let started = std::time::Instant::now();
        let log = match extend_library(&mut library, &env, cfg.seed) {
            Ok(log) => log,
            Err(Error::ConstraintsInfeasible(why)) => {
                summary.stopped = Some(format!("policy {i}: constraints infeasible: {why}"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        summary.train_seconds.push(started.elapsed().as_secs_f64());
        write(
            &out.join(format!("train_log_{i}.csv")),
            &format!("# config_hash={hash}\n# policy={i}\n{}", log.to_delimited()),
        )?;
        write(&out.join("library.json"), &library.to_json())?;
        let (report, traj) = evaluate_entry(cfg, &library, &env, i, cfg.eval.episodes, cfg.seed, rejection)?;
        write(&out.join(format!("eval_{i}.csv")), &traj.to_text())?;
        summary.entries.push(report);
    }
    write(&out.join("summary.txt"), &summary.to_text())?;
    Ok(summary)
}

/// Evaluates entry `index` of a saved library. `fallback` overrides the
/// config's setting.
pub fn cmd_eval(
    cfg: &RunConfig,
    library_path: &Path,
    index: usize,
    episodes: usize,
    seed: u64,
    fallback: Option<bool>,
) -> Result<(EvalReport, PathBuf)> {
    let library = load_library(library_path)?;
    if index >= library.len() {
        return Err(CliError::Config(format!(
            "policy index {index} out of range; the library has {} entries",
            library.len()
        )));
    }
    let env = Env::new(library.env.clone())?;
    let rejection = RejectionConfig {
        max_attempts: cfg.eval.max_attempts,
        fallback: fallback.unwrap_or(cfg.eval.fallback),
    };
    let (report, traj) = evaluate_entry(cfg, &library, &env, index, episodes, seed, rejection)?;
    let stem = cfg.out_dir.join(format!("eval_p{index}_s{seed}"));
    write(&stem.with_extension("csv"), &traj.to_text())?;
    write(
        &stem.with_extension("txt"),
        &format!("# config_hash={}\n{}", cfg.hash(), report.to_text()),
    )?;
    Ok((report, stem.with_extension("csv")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutcome {
    pub success: bool,
    pub rounds: usize,
    pub env_steps: usize,
    pub termination: Termination,
}

impl From<&RecoveryTrace> for ArmOutcome {
    fn from(t: &RecoveryTrace) -> Self {
        Self {
            success: t.success,
            rounds: t.rounds,
            env_steps: t.env_steps(),
            termination: t.termination,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRow {
    pub seed: u64,
    pub optimal_only: bool,
    pub contingency: ArmOutcome,
    pub random: ArmOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoverReport {
    pub config_hash: String,
    pub blockades: Vec<Corridor>,
    pub rows: Vec<RecoveryRow>,
}

impl RecoverReport {
    fn rate(&self, f: impl Fn(&RecoveryRow) -> bool) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| f(r)).count() as f64 / self.rows.len() as f64
    }

    pub fn optimal_only_rate(&self) -> f64 {
        self.rate(|r| r.optimal_only)
    }

    pub fn contingency_rate(&self) -> f64 {
        self.rate(|r| r.contingency.success)
    }

    pub fn random_rate(&self) -> f64 {
        self.rate(|r| r.random.success)
    }

    /// Discordant pairs: (contingency only, random only).
    pub fn discordant(&self) -> (u64, u64) {
        let plus = self.rows.iter().filter(|r| r.contingency.success && !r.random.success).count();
        let minus = self.rows.iter().filter(|r| !r.contingency.success && r.random.success).count();
        (plus as u64, minus as u64)
    }

    /// One-sided sign test that the contingency arm succeeds more often.
    pub fn sign_test_p(&self) -> f64 {
        let (plus, minus) = self.discordant();
        sign_test_upper(plus, plus + minus)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "# config_hash={}\nseed,optimal_only,contingency_success,contingency_rounds,contingency_steps,contingency_termination,random_success,random_rounds,random_steps,random_termination\n",
            self.config_hash
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.optimal_only,
                r.contingency.success,
                r.contingency.rounds,
                r.contingency.env_steps,
                r.contingency.termination,
                r.random.success,
                r.random.rounds,
                r.random.env_steps,
                r.random.termination
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let (plus, minus) = self.discordant();
        let blockades: Vec<&str> = self.blockades.iter().map(|c| c.name()).collect();
        format!(
            "# config_hash={}\nblockades={}\nseeds={}\noptimal_only_success={:.4}\ncontingency_success={:.4}\nrandom_success={:.4}\ndiscordant_pairs={plus}:{minus}\nsign_test_p={:.6e}\n",
            self.config_hash,
            if blockades.is_empty() { "none".to_string() } else { blockades.join(";") },
            self.rows.len(),
            self.optimal_only_rate(),
            self.contingency_rate(),
            self.random_rate(),
            self.sign_test_p()
        )
    }
}

/// P(X >= k) for X ~ Binomial(n, 1/2).
pub fn sign_test_upper(k: u64, n: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("p = 1/2 is valid");
    1.0 - b.cdf(k - 1)
}

fn trace_text(hash: &str, fingerprint: &str, arm: &str, seed: u64, t: &RecoveryTrace) -> String {
    format!(
        "{TRACE_MAGIC}\n# config_hash={hash}\n# env_fingerprint={fingerprint}\n# arm={arm}\n# seed={seed}\n# success={}\n# rounds={}\n# termination={}\n{}",
        t.success,
        t.rounds,
        t.termination,
        t.to_delimited()
    )
}

/// Matched-seed recovery experiment with the configured blockades.
pub fn cmd_recover(cfg: &RunConfig, library_path: &Path) -> Result<RecoverReport> {
    cfg.validate()?;
    let library = load_library(library_path)?;
    if library.len() < 2 {
        return Err(CliError::Config(format!(
            "the contingency arm needs a library with at least 2 entries, found {}",
            library.len()
        )));
    }
    let mut env = Env::new(library.env.clone())?;
    for c in &cfg.experiment.blockades {
        env.set_blockade(*c, true);
    }
    let out = &cfg.out_dir;
    let hash = cfg.hash();
    write(&out.join("geometry_blocked.json"), &GeometryExport::from_env(&env).to_json())?;

    let optimal = library.projected(0)?;
    let mode = RejectionConfig {
        max_attempts: 1,
        fallback: true,
    };
    let mut report = RecoverReport {
        config_hash: hash.clone(),
        blockades: cfg.experiment.blockades.clone(),
        rows: Vec::new(),
    };
    for k in 0..cfg.experiment.seeds {
        let seed = cfg.experiment.first_seed + k as u64;
        let mut scratch = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let plain = rollout(&mut env.clone(), seed, |s| {
            let rep = optimal.greedy(&s, mode, &mut scratch)?;
            Ok([rep.action[0], rep.action[1]])
        })?;
        let cont = run_with_recovery(&env, &library, &cfg.recovery, seed)?;
        let rand = run_with_random_recovery(&env, &optimal, &cfg.recovery, seed)?;
        write(
            &out.join(format!("traces/contingency_{seed}.csv")),
            &trace_text(&hash, &library.env_fingerprint, "contingency", seed, &cont),
        )?;
        write(
            &out.join(format!("traces/random_{seed}.csv")),
            &trace_text(&hash, &library.env_fingerprint, "random", seed, &rand),
        )?;
        report.rows.push(RecoveryRow {
            seed,
            optimal_only: plain.success,
            contingency: (&cont).into(),
            random: (&rand).into(),
        });
    }
    write(&out.join("recovery.csv"), &report.table())?;
    write(&out.join("recovery_summary.txt"), &report.summary())?;
    Ok(report)
}

/// Splits a recovery trace into same-controller polylines plus dashed
/// restore jumps.
pub fn trace_segments(rows: &[novelty_sac::recovery::TraceStep]) -> Vec<Segment> {
    let mut segs: Vec<Segment> = Vec::new();
    for (i, row) in rows.iter().enumerate().skip(1) {
        let prev = rows[i - 1].position;
        if row.controller == Controller::Backtrack {
            segs.push(Segment {
                tag: row.controller.to_string(),
                points: vec![prev, row.position],
                jump: true,
            });
            continue;
        }
        let tag = row.controller.to_string();
        match segs.last_mut() {
            Some(s) if !s.jump && s.tag == tag => s.points.push(row.position),
            _ => segs.push(Segment {
                tag,
                points: vec![prev, row.position],
                jump: false,
            }),
        }
    }
    segs
}

/// Renders `geometry` and every input file (trajectory files or recovery
/// traces) into `out`.
pub fn cmd_plot(geometry_path: &Path, inputs: &[PathBuf], out: &Path, title: &str) -> Result<()> {
    let geometry = GeometryExport::from_json(&read(geometry_path)?).map_err(|e| CliError::Parse {
        path: geometry_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut segments = Vec::new();
    for path in inputs {
        let text = read(path)?;
        if text.starts_with(TRACE_MAGIC) {
            let rows = RecoveryTrace::parse_rows(&text).map_err(|e| CliError::Parse {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            segments.extend(trace_segments(&rows));
        } else {
            let file = TrajectoryFile::parse(&text).map_err(|detail| CliError::Parse {
                path: path.clone(),
                detail,
            })?;
            for (tag, points) in file.paths() {
                segments.push(Segment {
                    tag,
                    points,
                    jump: false,
                });
            }
        }
    }
    write(out, &render_svg(&geometry, &segments, title))
}
