//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Artifacts stay under the target directory
//! for inspection.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use novelty_sac::gradcheck::GradCase;
use novelty_sac::novelty::{constrained_actor_loss_graph, constrained_critic_target, KlBranch, RejectionConfig};
use novelty_sac::sac::{actor_loss_graph, critic_td_target, draw_noise, Batch, CriticPair, SacHyper, Transition};
use novelty_sac::{gaussian_tanh_log_prob, gaussian_tanh_sample, Corridor, GaussianTanhHead, Graph, PolicyParams};
use novelty_sac_cli::commands::{cmd_eval, cmd_plot, cmd_recover, cmd_train, RecoverReport, TrainSummary};
use novelty_sac_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    criterion: u8,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {}: {tag} ({})", v.criterion, v.detail);
}

fn workdir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn maze_config(seed: u64, out: PathBuf) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/maze.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.seed = seed;
    cfg.out_dir = out;
    cfg
}

fn autodiff_soundness() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let case = GradCase::random(&mut rng);
        worst = worst.max(case.max_relative_error(1e-5, 1e-8).unwrap());
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict {
        criterion: 1,
        pass: worst < 1e-4 && secs < 60.0,
        detail: format!("100 configurations, worst relative error {worst:.2e}, {secs:.1}s"),
    }
}

fn squashed_gaussian_density() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_mass: f64 = 0.0;
    let mut worst_trip: f64 = 0.0;
    for _ in 0..20 {
        let head = GaussianTanhHead::new(vec![rng.random_range(-1.5..1.5)], vec![rng.random_range(-1.5..0.5)]).unwrap();
        let n = 100_000;
        let h = 2.0 / n as f64;
        let mass = (1..n)
            .map(|k| gaussian_tanh_log_prob(&head, &[-1.0 + k as f64 * h]).exp())
            .sum::<f64>()
            * h;
        worst_mass = worst_mass.max((mass - 1.0).abs());
        for _ in 0..100 {
            let z: f64 = rng.sample(StandardNormal);
            let (a, lp) = gaussian_tanh_sample(&head, &[z]).unwrap();
            worst_trip = worst_trip.max((gaussian_tanh_log_prob(&head, &a) - lp).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict {
        criterion: 2,
        pass: worst_mass < 1e-3 && worst_trip < 1e-9 && secs < 60.0,
        detail: format!("20 heads, worst |mass - 1| {worst_mass:.2e}, worst round trip {worst_trip:.2e}, {secs:.1}s"),
    }
}

fn random_batch(rng: &mut ChaCha8Rng) -> Batch {
    let n = rng.random_range(1..=64);
    let items: Vec<Transition> = (0..n)
        .map(|_| Transition {
            s: [rng.random(), rng.random()],
            a: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            r: if rng.random_bool(0.1) { 9.9 } else { -0.1 },
            s_next: [rng.random(), rng.random()],
            done: rng.random_bool(0.1),
        })
        .collect();
    Batch::from_transitions(&items)
}

fn sac_reduction() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hyper = SacHyper::default();
    let cfg = RejectionConfig {
        max_attempts: 64,
        fallback: true,
    };
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut mismatches = 0;
    for i in 0..1000u64 {
        if i % 50 == 0 {
            // fresh networks every 50 batches
            rng = ChaCha8Rng::seed_from_u64(1000 + i);
        }
        let actor = PolicyParams::init(2, 2, &[16, 16], &mut rng);
        let critics = CriticPair::init(&[16, 16], true, &mut rng);
        let batch = random_batch(&mut rng);

        let plain = critic_td_target(&batch, &actor, &critics, &hyper, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        let constrained =
            constrained_critic_target(&batch, &actor, &critics, &[], &hyper, cfg, &mut ChaCha8Rng::seed_from_u64(i))
                .unwrap();

        let noise = draw_noise(batch.len(), 2, &mut ChaCha8Rng::seed_from_u64(i));
        let mut g1 = Graph::new();
        let v1 = actor.net.bind(&mut g1, true);
        let a1 = actor_loss_graph(&mut g1, &actor, &v1, &critics, &batch.states, &noise, &hyper).unwrap();
        let grads1 = g1.backward(a1.loss).unwrap();
        let mut g2 = Graph::new();
        let v2 = actor.net.bind(&mut g2, true);
        let a2 = constrained_actor_loss_graph(
            &mut g2,
            &actor,
            &v2,
            &critics,
            &[],
            &batch.states,
            &noise,
            &hyper,
            KlBranch::default(),
        )
        .unwrap();
        let grads2 = g2.backward(a2.loss).unwrap();

        let same_grads = v1
            .handles()
            .zip(v2.handles())
            .all(|(x, y)| grads1.get(x).map(bits) == grads2.get(y).map(bits));
        let same = bits(&plain) == bits(&constrained)
            && g1.value(a1.loss).item().to_bits() == g2.value(a2.loss).item().to_bits()
            && same_grads;
        mismatches += usize::from(!same);
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict {
        criterion: 3,
        pass: mismatches == 0 && secs < 60.0,
        detail: format!("1000 batches, {mismatches} not bit-identical, {secs:.1}s"),
    }
}

struct Pipeline {
    out: PathBuf,
    train: TrainSummary,
    train_secs: f64,
    recover: Result<RecoverReport, String>,
    recover_secs: f64,
    eval_violations: Result<(usize, usize), String>,
}

/// Train, evaluate with fallback disabled, run the recovery experiment and
/// render the four figures into `out`.
fn pipeline(seed: u64, out: &Path) -> Pipeline {
    let cfg = maze_config(seed, out.to_path_buf());
    let t = Instant::now();
    let train = cmd_train(&cfg).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let library = out.join("library.json");

    let mut strict = cfg.clone();
    strict.eval.max_attempts = 100_000;
    let eval_violations = if train.entries.len() > 1 {
        cmd_eval(&strict, &library, 1, 100, seed, Some(false))
            .map(|(r, _)| (r.violations, r.actions))
            .map_err(|e| e.to_string())
    } else {
        Err("library has no second entry".into())
    };

    let t = Instant::now();
    let recover = cmd_recover(&cfg, &library).map_err(|e| e.to_string());
    let recover_secs = t.elapsed().as_secs_f64();

    let geometry = out.join("geometry.json");
    let blocked = out.join("geometry_blocked.json");
    let evals: Vec<PathBuf> = (0..train.entries.len()).map(|i| out.join(format!("eval_{i}.csv"))).collect();
    let first = cfg.experiment.first_seed;
    cmd_plot(&geometry, &evals[..1], &out.join("fig1_optimal.svg"), "optimal policy").unwrap();
    cmd_plot(&geometry, &evals, &out.join("fig2_library.svg"), "policy library").unwrap();
    if recover.is_ok() {
        cmd_plot(
            &blocked,
            &[out.join(format!("traces/contingency_{first}.csv"))],
            &out.join("fig3_contingency_recovery.svg"),
            "contingency recovery",
        )
        .unwrap();
        cmd_plot(
            &blocked,
            &[out.join(format!("traces/random_{first}.csv"))],
            &out.join("fig4_random_recovery.svg"),
            "random recovery",
        )
        .unwrap();
    }
    Pipeline {
        out: out.to_path_buf(),
        train,
        train_secs,
        recover,
        recover_secs,
        eval_violations,
    }
}

fn name(c: Option<Corridor>) -> &'static str {
    c.map(Corridor::name).unwrap_or("none")
}

fn optimal_solves(p: &Pipeline) -> Verdict {
    let e = &p.train.entries[0];
    let secs = p.train.train_seconds[0];
    let log = fs::read_to_string(p.out.join("train_log_0.csv")).unwrap();
    let steps: usize = log
        .lines()
        .last()
        .and_then(|l| l.strip_prefix("# steps="))
        .and_then(|l| l.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .unwrap();
    let successes = (e.success_rate * e.episodes as f64).round() as usize;
    Verdict {
        criterion: 4,
        pass: successes >= 95 && e.majority == Some(Corridor::Middle) && steps <= 200_000 && secs <= 900.0,
        detail: format!(
            "{successes}/{} greedy successes, majority {}, {steps} env steps, {secs:.0}s",
            e.episodes,
            name(e.majority)
        ),
    }
}

fn constraint_satisfaction(p: &Pipeline) -> Verdict {
    match &p.eval_violations {
        Ok((violations, actions)) => Verdict {
            criterion: 5,
            pass: *violations == 0,
            detail: format!("{violations} of {actions} executed actions above a prior threshold, fallback disabled"),
        },
        Err(e) => Verdict {
            criterion: 5,
            pass: false,
            detail: format!("evaluation failed: {e}"),
        },
    }
}

fn diversity(runs: &[&Pipeline]) -> Verdict {
    let p0 = runs[0];
    let optimal = p0.train.entries[0].majority;
    let outside = match (optimal, p0.train.entries.get(1)) {
        (Some(c), Some(e)) => e.episodes_outside(c),
        _ => 0,
    };
    let distinct = runs.iter().filter(|p| p.train.entries.len() == 3 && p.train.pairwise_distinct()).count();
    let secs: f64 = runs.iter().map(|p| p.train_secs).sum();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|p| {
            let m: Vec<&str> = p.train.majorities().into_iter().map(name).collect();
            format!("[{}]", m.join(" "))
        })
        .collect();
    Verdict {
        criterion: 6,
        pass: outside >= 90 && distinct >= 2 && secs <= 45.0 * 60.0,
        detail: format!(
            "second policy outside the optimal corridor in {outside}/100 episodes, distinct triples on {distinct}/3 seeds {}, {secs:.0}s training",
            per_seed.join(" ")
        ),
    }
}

fn recovery(p: &Pipeline) -> Verdict {
    let r = match &p.recover {
        Ok(r) => r,
        Err(e) => {
            return Verdict {
                criterion: 7,
                pass: false,
                detail: format!("recovery experiment failed: {e}"),
            }
        }
    };
    let n = r.rows.len() as f64;
    let count = |rate: f64| (rate * n).round() as usize;
    let (opt, cont, rand) = (count(r.optimal_only_rate()), count(r.contingency_rate()), count(r.random_rate()));
    let pval = r.sign_test_p();
    Verdict {
        criterion: 7,
        pass: opt <= 5 && cont >= 80 && rand < cont && pval < 0.05 && p.recover_secs <= 20.0 * 60.0,
        detail: format!(
            "optimal only {opt}/100, contingency {cont}/100, random {rand}/100, sign test p {pval:.2e}, {:.0}s",
            p.recover_secs
        ),
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Verdict {
    let fa = files(a);
    let rel = |root: &Path, p: &PathBuf| p.strip_prefix(root).unwrap().to_path_buf();
    let names_a: Vec<PathBuf> = fa.iter().map(|p| rel(a, p)).collect();
    let names_b: Vec<PathBuf> = files(b).iter().map(|p| rel(b, p)).collect();
    let differing: Vec<String> = names_a
        .iter()
        .filter(|n| fs::read(a.join(n)).ok() != fs::read(b.join(n)).ok())
        .map(|n| n.display().to_string())
        .collect();
    Verdict {
        criterion: 8,
        pass: names_a == names_b && differing.is_empty(),
        detail: format!(
            "{} files compared, {} differ{}",
            names_a.len(),
            differing.len(),
            differing.first().map(|d| format!(", first {d}")).unwrap_or_default()
        ),
    }
}

#[test]
fn acceptance() {
    let dir = workdir();
    let mut verdicts = Vec::new();
    let mut emit = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };
    emit(autodiff_soundness());
    emit(squashed_gaussian_density());
    emit(sac_reduction());

    let run0 = pipeline(0, &dir.join("seed0"));
    emit(optimal_solves(&run0));
    emit(constraint_satisfaction(&run0));
    let run1 = pipeline(1, &dir.join("seed1"));
    let run2 = pipeline(2, &dir.join("seed2"));
    emit(diversity(&[&run0, &run1, &run2]));
    emit(recovery(&run0));

    let _rerun = pipeline(0, &dir.join("seed0_rerun"));
    emit(determinism(&dir.join("seed0"), &dir.join("seed0_rerun")));

    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.pass).map(|v| v.criterion).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
